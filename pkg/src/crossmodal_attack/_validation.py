"""Input checks shared by the estimators.

Modelled on ``sklearn.utils.validation``: each helper either returns a
cleaned array or raises ``ValueError`` with a message naming the argument.
"""
from __future__ import annotations

import numbers

import numpy as np
import torch


class TrainingDivergedError(RuntimeError):
    """A loss or intermediate tensor went non-finite during training."""


def check_images(images, name="images", allow_empty=False) -> np.ndarray:
    """Return an ``(N, H, W, C)`` float32 array with values in [0, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (N, H, W, C), got {arr.shape}")
    if arr.shape[0] == 0 and not allow_empty:
        raise ValueError(f"{name} is empty")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"{name} must lie in [0, 1], got range [{arr.min()}, {arr.max()}]")
    return arr


def check_matrix(x, name="X", ncols=None, dtype=np.float64) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if ncols is not None and arr.shape[1] != ncols:
        raise ValueError(f"{name} has {arr.shape[1]} columns, expected {ncols}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_fraction(value, name, low=0.0, high=1.0, low_open=False, high_open=False) -> float:
    if not isinstance(value, numbers.Real):
        raise ValueError(f"{name} must be a real number, got {value!r}")
    value = float(value)
    too_low = value <= low if low_open else value < low
    too_high = value >= high if high_open else value > high
    if too_low or too_high:
        lb = "(" if low_open else "["
        rb = ")" if high_open else "]"
        raise ValueError(f"{name} must be in {lb}{low}, {high}{rb}, got {value}")
    return value


def check_positive_int(value, name, allow_zero=False) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ValueError(f"{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return int(value)


def check_finite_loss(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss).all():
        raise TrainingDivergedError(f"non-finite loss during {where}: {loss.detach().cpu().numpy()}")


def to_nchw(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(images.transpose(0, 3, 1, 2)), dtype=dtype)


def to_nhwc(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().transpose(0, 2, 3, 1)


def seeded_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen
