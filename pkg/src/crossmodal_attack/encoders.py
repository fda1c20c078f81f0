"""Small convolutional image encoders.

One class serves three roles: the victim's visual feature extractor, the
attacker's semantic encoder (CLIP stand-in) and the attacker's alignment
extractor.  Each is pretrained as an autoencoder on whatever images its owner
may read, then frozen.  Outputs are z-scored with statistics frozen at fit
time, so downstream code sees "normalized features".
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_finite_loss, check_images, check_positive_int, seeded_generator, to_nchw


def _n_down(size: int, floor: int = 8) -> int:
    n = 0
    while size > floor and size % 2 == 0:
        size //= 2
        n += 1
    return max(n, 1) if size % 2 == 0 else n


class ConvEncoder(nn.Module):
    def __init__(self, image_shape, d_f, width=32):
        super().__init__()
        h, w, c = image_shape
        n = _n_down(min(h, w))
        layers, ch = [], c
        for k in range(n):
            out = min(width, 8 * 2 ** k)
            layers += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch = out
        self.trunk = nn.Sequential(*layers, nn.Flatten())
        self.grid = (ch, h // 2 ** n, w // 2 ** n)
        self.head = nn.Linear(int(np.prod(self.grid)), d_f)

    def forward(self, x):
        return self.head(self.trunk(x))


class ConvDecoder(nn.Module):
    def __init__(self, grid, d_f, out_channels, n_up):
        super().__init__()
        ch = grid[0]
        self.grid = grid
        self.fc = nn.Linear(d_f, int(np.prod(grid)))
        mods = []
        for _ in range(n_up):
            out = max(ch // 2, 8)
            mods += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                     nn.Conv2d(ch, out, 3, padding=1), nn.LeakyReLU(0.2)]
            ch = out
        mods += [nn.Conv2d(ch, out_channels, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*mods)

    def forward(self, f):
        return self.net(self.fc(f).view(-1, *self.grid))


class FeatureEncoder(BaseEstimator, TransformerMixin):
    """Autoencoder-pretrained CNN mapping images to ``d_f`` normalized features.

    Parameters
    ----------
    d_f : int
        Output feature dimension.
    epochs, lr, batch_size : training schedule of the autoencoder.
    seed : int
        Fixes initialisation and minibatch order.
    """

    def __init__(self, d_f=64, epochs=40, lr=3e-3, batch_size=32, width=32, seed=0):
        self.d_f = d_f
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.width = width
        self.seed = seed

    def fit(self, images, y=None):
        x = check_images(images)
        if len(x) < 2:
            raise ValueError("pretraining needs at least 2 images")
        check_positive_int(self.d_f, "d_f")
        torch.manual_seed(self.seed)
        enc = ConvEncoder(x.shape[1:], self.d_f, self.width)
        dec = ConvDecoder(enc.grid, self.d_f, x.shape[3], _n_down(min(x.shape[1:3])))
        params = list(enc.parameters()) + list(dec.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        data = to_nchw(x)
        gen = seeded_generator(self.seed)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            perm = torch.randperm(len(data), generator=gen)
            total = 0.0
            for start in range(0, len(data), self.batch_size):
                batch = data[perm[start:start + self.batch_size]]
                loss = torch.mean((dec(enc(batch)) - batch) ** 2)
                check_finite_loss(loss, f"encoder pretraining epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            self.loss_curve_.append(total / len(data))
        enc.eval()
        for p in enc.parameters():
            p.requires_grad_(False)
        with torch.no_grad():
            raw = enc(data)
        self.network_ = enc
        self.image_shape_ = tuple(x.shape[1:])
        self.mean_ = raw.mean(0)
        self.scale_ = raw.std(0).clamp_min(1e-6)
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable feature map on an NCHW tensor."""
        check_is_fitted(self, "network_")
        net = self.network_
        if x.dtype != next(net.parameters()).dtype:
            net = copy.deepcopy(net).to(x.dtype)
        return (net(x) - self.mean_.to(x.dtype)) / self.scale_.to(x.dtype)

    __call__ = forward

    def transform(self, images) -> np.ndarray:
        x = check_images(images)
        if tuple(x.shape[1:]) != self.image_shape_:
            raise ValueError(f"encoder was fitted on {self.image_shape_} images, got {x.shape[1:]}")
        with torch.no_grad():
            return self.forward(to_nchw(x)).numpy().astype(np.float64)

    @property
    def output_dim(self) -> int:
        return self.d_f


def pretrain_encoder(images, d_f=64, epochs=40, seed=0, **kwargs) -> FeatureEncoder:
    return FeatureEncoder(d_f=d_f, epochs=epochs, seed=seed, **kwargs).fit(images)
