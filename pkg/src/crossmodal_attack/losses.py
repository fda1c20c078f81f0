"""Training losses for the perturbation generator and the top-level attack objective."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch.nn import functional as F

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    clip: float = 1.0
    ssim: float = 1.0
    align: float = 0.5
    tradeoff: float = 1.0  # stealth vs exposure in the attack objective

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ValueError(f"loss weight {name} must be non-negative, got {value}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.clip * factor, self.ssim * factor, self.align * factor, self.tradeoff)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    return x[None] if x.ndim == 3 else x


def _check_pair(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def gaussian_window(size: int, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-ax ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def fitted_window(h: int, w: int, size: int = 11) -> int:
    """Largest odd window no bigger than ``size`` that fits an h x w image."""
    size = min(size, h, w)
    return size if size % 2 else size - 1


def ssim(x: torch.Tensor, y: torch.Tensor, window: int = 11, sigma: float = 1.5, reduce: bool = True):
    """Gaussian-window SSIM over valid windows, averaged over windows and channels.

    Inputs are NCHW (or CHW) with data range 1. With ``reduce=False`` a per-image
    vector is returned.
    """
    x, y = _as_batch(x), _as_batch(y)
    _check_pair(x, y, "ssim")
    n, c, h, w = x.shape
    size = fitted_window(h, w, window)
    if size < 1:
        raise ValueError(f"image {h}x{w} too small for SSIM")
    kernel = gaussian_window(size, sigma, x.dtype).expand(c, 1, size, size)

    def filt(t):
        return F.conv2d(t, kernel, groups=c)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    per_image = (num / den).flatten(1).mean(1)
    return per_image.mean() if reduce else per_image


def ssim_loss(x0: torch.Tensor, x_adv: torch.Tensor, reduce: bool = True):
    return 1.0 - ssim(x0, x_adv, reduce=reduce)


def clip_loss(x0: torch.Tensor, x_adv: torch.Tensor, encoder, reduce: bool = True):
    """Squared L2 distance between semantic embeddings."""
    x0, x_adv = _as_batch(x0), _as_batch(x_adv)
    _check_pair(x0, x_adv, "clip_loss")
    d = ((encoder(x0) - encoder(x_adv)) ** 2).sum(dim=1)
    return d.mean() if reduce else d


def cosine_alignment(projected: torch.Tensor, e_u: torch.Tensor) -> torch.Tensor:
    """-cos(projected, e_u) row-wise; zero-norm projections score 0."""
    projected = projected if projected.ndim == 2 else projected[None]
    e_u = torch.as_tensor(e_u, dtype=projected.dtype)
    if projected.shape[-1] != e_u.shape[-1]:
        raise ValueError(f"projected feature dim {projected.shape[-1]} != user embedding dim {e_u.shape[-1]}")
    e_u = e_u.expand_as(projected) if e_u.ndim == 1 else e_u
    if (e_u.norm(dim=1) == 0).any():
        raise ValueError("user embedding has zero norm")
    pn = projected.norm(dim=1)
    degenerate = pn == 0
    if degenerate.any():
        warnings.warn("zero-norm projected feature; alignment defined as 0", RuntimeWarning)
    cos = (projected * e_u).sum(1) / (pn.clamp_min(1e-30) * e_u.norm(dim=1))
    return -torch.where(degenerate, torch.zeros_like(cos), cos)


def align_loss(x_adv: torch.Tensor, e_u, extractor, head, reduce: bool = True):
    out = cosine_alignment(head(extractor(_as_batch(x_adv))), e_u)
    return out.mean() if reduce else out


@dataclass
class LossComponents:
    """Frozen networks the composite loss needs."""

    semantic: object
    extractor: object
    head: object


def total_loss(x0, x_adv, e_u, weights: LossWeights, components: LossComponents):
    """Weighted composite loss; returns (total, {term: value})."""
    terms = {
        "clip": clip_loss(x0, x_adv, components.semantic) if weights.clip else _zero(x_adv),
        "ssim": ssim_loss(x0, x_adv) if weights.ssim else _zero(x_adv),
        "align": align_loss(x_adv, e_u, components.extractor, components.head) if weights.align else _zero(x_adv),
    }
    total = weights.clip * terms["clip"] + weights.ssim * terms["ssim"] + weights.align * terms["align"]
    return total, terms


def combine(terms: dict, weights: LossWeights) -> float:
    v = {k: float(t.detach()) if isinstance(t, torch.Tensor) else float(t) for k, t in terms.items()}
    return weights.clip * v["clip"] + weights.ssim * v["ssim"] + weights.align * v["align"]


def _zero(like):
    return torch.zeros((), dtype=like.dtype)


def attack_objective(hr_per_item, distortions, tradeoff: float = 1.0) -> float:
    """mean HR - tradeoff * mean distortion over the attacked items."""
    hr = np.asarray(hr_per_item, dtype=np.float64)
    d = np.asarray(distortions, dtype=np.float64)
    if hr.size == 0 or d.size == 0:
        raise ValueError("attack objective needs at least one target item")
    if hr.shape != d.shape:
        raise ValueError(f"{hr.size} hit ratios for {d.size} distortions")
    return float(hr.mean() - tradeoff * d.mean())


def write_loss_curve(rows, path) -> None:
    """CSV with columns step, total, clip, ssim, align."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "total", "clip", "ssim", "align"])
        for r in rows:
            writer.writerow([r["step"]] + [f"{float(r[k]):.10g}" for k in ("total", "clip", "ssim", "align")])


def read_loss_curve(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"step": int(r["step"]), **{k: float(r[k]) for k in ("total", "clip", "ssim", "align")}}
                for r in csv.DictReader(fh)]
