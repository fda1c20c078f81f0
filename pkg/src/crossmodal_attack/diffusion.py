"""Desk-scale latent diffusion: VAE, noise schedule, DDIM and latent injection.

The VAE and the noise predictor stand in for a public pretrained backbone.
They are trained once on the available images and then frozen; only the
perturbation generator upstream ever receives gradient updates.
"""
from __future__ import annotations

import copy
import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._validation import (TrainingDivergedError, check_finite_loss, check_images, check_positive_int,
                          seeded_generator, to_nchw, to_nhwc)
from .dataset import ItemImage, ItemImages

DIFFUSION_FORMAT = "crossmodal-attack/diffusion"
DIFFUSION_VERSION = 1


# ---------------------------------------------------------------------------
# schedule and closed-form operations

@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta schedule. Arrays are indexed by step t in 0..T with alpha_bar[0] = 1."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray
    ddim_steps: tuple

    @property
    def inject_step(self) -> int:
        """Default injection point: the midpoint of the DDIM subsequence."""
        return self.ddim_steps[len(self.ddim_steps) // 2]

    def check_step(self, t: int) -> int:
        if not 0 <= int(t) <= self.T:
            raise ValueError(f"step {t} outside schedule [0, {self.T}]")
        return int(t)

    def reverse_steps(self, start: int) -> list[int]:
        """DDIM subsequence from ``start`` down to 0 (``start`` must belong to it)."""
        if start not in self.ddim_steps:
            raise ValueError(f"step {start} is not in the DDIM subsequence")
        k = self.ddim_steps.index(start)
        return list(self.ddim_steps[k:])


def ddim_subsequence(T: int, n_steps: int) -> tuple:
    """``n_steps`` uniformly spaced steps from T down, followed by 0."""
    check_positive_int(n_steps, "ddim_steps")
    if n_steps > T:
        raise ValueError(f"cannot take {n_steps} DDIM steps from a {T}-step schedule")
    seq = np.round(np.linspace(T, 0, n_steps + 1)).astype(int)
    if len(np.unique(seq)) != len(seq):
        raise ValueError(f"{n_steps} steps do not give distinct indices for T={T}")
    return tuple(int(s) for s in seq)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2,
                  ddim_steps: int = 50) -> DiffusionSchedule:
    check_positive_int(T, "T")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alphas = 1.0 - betas
    alpha_bar = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bar):
        arr.setflags(write=False)
    return DiffusionSchedule(T, betas, alphas, alpha_bar, ddim_subsequence(T, ddim_steps))


def _ab(schedule: DiffusionSchedule, t: int) -> float:
    return float(schedule.alpha_bar[schedule.check_step(t)])


def _same_shape(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0, t: int, eps, schedule: DiffusionSchedule):
    _same_shape(z0, eps, "forward_noise")
    a = _ab(schedule, t)
    return math.sqrt(a) * z0 + math.sqrt(1.0 - a) * eps


def inject(z_t, delta, eta: float):
    _same_shape(z_t, delta, "inject")
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    return z_t + eta * delta


def predicted_clean(z_t, eps_hat, t: int, schedule: DiffusionSchedule):
    a = _ab(schedule, t)
    return (z_t - math.sqrt(1.0 - a) * eps_hat) / math.sqrt(a)


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: DiffusionSchedule):
    """Deterministic DDIM update from step t to t_prev, using cumulative alphas."""
    _same_shape(z_t, eps_hat, "ddim_step")
    t, t_prev = schedule.check_step(t), schedule.check_step(t_prev)
    if t_prev >= t:
        raise ValueError(f"t_prev={t_prev} must be below t={t}")
    a_prev = float(schedule.alpha_bar[t_prev])
    return math.sqrt(a_prev) * predicted_clean(z_t, eps_hat, t, schedule) + math.sqrt(1.0 - a_prev) * eps_hat


# ---------------------------------------------------------------------------
# networks

def _n_levels(image_size: int, latent_size: int) -> int:
    ratio = image_size // latent_size
    if latent_size * ratio != image_size or ratio & (ratio - 1):
        raise ValueError(f"image size {image_size} is not a power-of-two multiple of latent size {latent_size}")
    return int(round(math.log2(ratio)))


class VAE(nn.Module):
    def __init__(self, image_shape, latent_shape, width=32):
        super().__init__()
        h, w, c = image_shape
        lc, lh, lw = latent_shape
        n = _n_levels(h, lh)
        if _n_levels(w, lw) != n:
            raise ValueError("latent grid must downsample height and width equally")
        self.image_shape = tuple(image_shape)
        self.latent_shape = tuple(latent_shape)
        self.width = width
        enc, ch = [nn.Conv2d(c, width, 3, padding=1), nn.SiLU()], width
        for k in range(n):
            out = min(width * 2 ** (k + 1), 128)
            enc += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(out, out, 3, padding=1), nn.SiLU()]
            ch = out
        enc.append(nn.Conv2d(ch, 2 * lc, 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(lc, ch, 3, padding=1), nn.SiLU()]
        for k in reversed(range(n)):
            out = min(width * 2 ** k, 128)
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, out, 3, padding=1), nn.SiLU(),
                    nn.Conv2d(out, out, 3, padding=1), nn.SiLU()]
            ch = out
        dec += [nn.Conv2d(ch, c, 3, padding=1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*dec)
        # latent normalization z = (mu - shift) * scale, fitted after training
        self.register_buffer("shift", torch.zeros(latent_shape))
        self.register_buffer("scale", torch.ones(()))

    def moments(self, x):
        mu, logvar = self.encoder(x).chunk(2, dim=1)
        return mu, logvar.clamp(-20, 10)

    def encode(self, x):
        """Deterministic (posterior-mean) latent, shifted and scaled to unit spread."""
        return (self.moments(x)[0] - self.shift) * self.scale

    def decode(self, z):
        return self.decoder(z / self.scale + self.shift)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class NoisePredictor(nn.Module):
    """Two-level UNet over the latent grid, conditioned on t and a learned null token."""

    def __init__(self, latent_shape, width=64, cond_dim=32):
        super().__init__()
        c, h, w = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.width = width
        emb = 4 * width
        self.time_mlp = nn.Sequential(nn.Linear(width, emb), nn.SiLU(), nn.Linear(emb, emb))
        # empty conditioning: a learned vector, frozen with the rest after training
        self.null_token = nn.Parameter(torch.zeros(cond_dim))
        self.cond_proj = nn.Linear(cond_dim, emb)
        self.inp = nn.Conv2d(c, width, 3, padding=1)
        self.down1 = _ResBlock(width, width, emb)
        self.downsample = min(h, w) >= 4 and h % 2 == 0 and w % 2 == 0
        inner = 2 * width if self.downsample else width
        self.pool = nn.Conv2d(width, inner, 3, stride=2, padding=1) if self.downsample else nn.Identity()
        self.mid1 = _ResBlock(inner, inner, emb)
        self.mid2 = _ResBlock(inner, inner, emb)
        self.unpool = nn.Conv2d(inner, width, 3, padding=1)
        self.up1 = _ResBlock(2 * width, width, emb)
        self.out_norm = nn.GroupNorm(8, width)
        self.out = nn.Conv2d(width, c, 3, padding=1)

    def forward(self, z, t, cond=None):
        if not torch.is_tensor(t) or t.ndim == 0:
            t = torch.full((z.shape[0],), int(t))
        if cond is None:
            cond = self.null_token.expand(z.shape[0], -1)
        emb = self.time_mlp(timestep_embedding(t, self.width).to(z.dtype)) + self.cond_proj(cond)
        emb = F.silu(emb)
        h0 = self.down1(self.inp(z), emb)
        h = self.mid2(self.mid1(self.pool(h0), emb), emb)
        if self.downsample:
            h = F.interpolate(h, size=h0.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([self.unpool(h), h0], dim=1), emb)
        return self.out(F.silu(self.out_norm(h)))


def _freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# training

def train_vae(images, latent_shape=(4, 8, 8), epochs=60, seed=0, lr=2e-3, batch_size=32,
              kl_weight=1e-4, width=32) -> VAE:
    x = check_images(images)
    if len(x) < 16:
        raise ValueError(f"VAE training needs at least 16 images, got {len(x)}")
    torch.manual_seed(seed)
    vae = VAE(x.shape[1:], latent_shape, width)
    data = to_nchw(x)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    gen = seeded_generator(seed)
    vae.loss_curve = []
    for epoch in range(epochs):
        perm = torch.randperm(len(data), generator=gen)
        total = 0.0
        for start in range(0, len(data), batch_size):
            batch = data[perm[start:start + batch_size]]
            mu, logvar = vae.moments(batch)
            z = mu + torch.exp(0.5 * logvar) * torch.randn(mu.shape, generator=gen)
            recon = vae.decoder(z)
            kl = 0.5 * torch.mean(mu ** 2 + logvar.exp() - 1.0 - logvar)
            loss = F.mse_loss(recon, batch) + kl_weight * kl
            check_finite_loss(loss, f"VAE training epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
        vae.loss_curve.append(total / len(data))
    with torch.no_grad():
        mu = vae.moments(data)[0]
        vae.shift.copy_(mu.mean(0))
        vae.scale.fill_(1.0 / float((mu - vae.shift).std().clamp_min(1e-6)))
    return _freeze(vae)


def fit_noise_predictor(latents: torch.Tensor, schedule: DiffusionSchedule, epochs=200, seed=0, lr=2e-3,
                        batch_size=64, width=64, t_max: int | None = None) -> NoisePredictor:
    """Standard epsilon-prediction objective on a fixed set of clean latents.

    ``t_max`` restricts training to steps 1..t_max (the range a sampler that
    starts at t_max will visit); default is the whole schedule.
    """
    latents = torch.as_tensor(latents, dtype=torch.float32)
    if latents.ndim != 4:
        raise ValueError(f"latents must be (N, c, h, w), got {tuple(latents.shape)}")
    torch.manual_seed(seed)
    net = NoisePredictor(latents.shape[1:], width)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1))
    t_max = schedule.T if t_max is None else schedule.check_step(t_max)
    ab = torch.tensor(schedule.alpha_bar, dtype=torch.float32)
    gen = seeded_generator(seed)
    net.loss_curve = []
    for epoch in range(epochs):
        perm = torch.randperm(len(latents), generator=gen)
        total = 0.0
        for start in range(0, len(latents), batch_size):
            z0 = latents[perm[start:start + batch_size]]
            t = torch.randint(1, t_max + 1, (len(z0),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            a = ab[t].view(-1, 1, 1, 1)
            z_t = a.sqrt() * z0 + (1 - a).sqrt() * eps
            loss = F.mse_loss(net(z_t, t), eps)
            check_finite_loss(loss, f"noise predictor training epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(z0)
        sched.step()
        net.loss_curve.append(total / len(latents))
    return _freeze(net)


def train_unet(vae: VAE, images, schedule: DiffusionSchedule, epochs=200, seed=0, **kwargs) -> NoisePredictor:
    x = to_nchw(check_images(images))
    with torch.no_grad():
        latents = vae.encode(x)
    return fit_noise_predictor(latents, schedule, epochs=epochs, seed=seed, **kwargs)


# ---------------------------------------------------------------------------
# adversarial generation

@dataclass
class AdversaryConfig:
    eta: float = 0.1
    inject_step: int | None = None  # None -> midpoint of the DDIM subsequence
    ddim_steps: int = 50
    seed: int = 0
    adaptive_eta: bool = True

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        check_positive_int(self.ddim_steps, "ddim_steps")


@dataclass
class LatentDiffusion:
    """Frozen VAE + noise predictor pair with their schedule."""

    vae: VAE
    unet: NoisePredictor
    schedule: DiffusionSchedule
    meta: dict = field(default_factory=dict)

    @property
    def latent_shape(self) -> tuple:
        return self.vae.latent_shape

    @property
    def dtype(self) -> torch.dtype:
        return next(self.unet.parameters()).dtype

    def astype(self, dtype) -> "LatentDiffusion":
        return LatentDiffusion(_freeze(copy.deepcopy(self.vae).to(dtype)),
                               _freeze(copy.deepcopy(self.unet).to(dtype)), self.schedule, dict(self.meta))

    def with_steps(self, ddim_steps: int) -> "LatentDiffusion":
        s = self.schedule
        schedule = make_schedule(s.T, float(s.betas[1]), float(s.betas[-1]), ddim_steps)
        return LatentDiffusion(self.vae, self.unet, schedule, dict(self.meta))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.vae.encode(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.vae.decode(z)

    def noise_for(self, item_keys, seed: int) -> torch.Tensor:
        """Per-item seeded forward noise, independent of batch composition."""
        out = []
        for key in item_keys:
            g = seeded_generator((int(seed) * 1_000_003 + zlib.crc32(str(key).encode())) % 2 ** 63)
            out.append(torch.randn(self.latent_shape, generator=g, dtype=torch.float64))
        return torch.stack(out).to(self.dtype)

    def inject_step(self, config: AdversaryConfig) -> int:
        schedule = self.schedule
        if config.ddim_steps != len(schedule.ddim_steps) - 1:
            raise ValueError(f"config asks for {config.ddim_steps} DDIM steps, backend is set to "
                             f"{len(schedule.ddim_steps) - 1}; use with_steps()")
        t_star = schedule.inject_step if config.inject_step is None else int(config.inject_step)
        schedule.reverse_steps(t_star)
        return t_star

    def effective_eta(self, z_t: torch.Tensor, delta: torch.Tensor, config: AdversaryConfig) -> torch.Tensor:
        if not config.adaptive_eta:
            return torch.full((len(z_t), 1, 1, 1), float(config.eta), dtype=z_t.dtype)
        dims = tuple(range(1, z_t.ndim))
        ratio = z_t.std(dim=dims) / delta.std(dim=dims).clamp_min(1e-12)
        return (config.eta * ratio).view(-1, 1, 1, 1)

    def denoise(self, z: torch.Tensor, t_star: int) -> torch.Tensor:
        steps = self.schedule.reverse_steps(t_star)
        for t, t_prev in zip(steps[:-1], steps[1:]):
            eps_hat = self.unet(z, torch.full((len(z),), t))
            z = ddim_step(z, eps_hat, t, t_prev, self.schedule)
            if not torch.isfinite(z).all():
                raise TrainingDivergedError(f"non-finite latent after DDIM step {t} -> {t_prev}")
        return z

    def generate(self, x0: torch.Tensor, delta: torch.Tensor | None, config: AdversaryConfig,
                 noise: torch.Tensor) -> torch.Tensor:
        """Differentiable in ``delta``: encode, noise to t*, inject, DDIM to 0, decode, clamp."""
        t_star = self.inject_step(config)
        z0 = self.encode(x0)
        if not torch.isfinite(z0).all():
            raise TrainingDivergedError("non-finite latent after encoding")
        z = forward_noise(z0, t_star, noise.to(z0.dtype), self.schedule)
        if delta is not None and config.eta > 0:
            delta = delta.to(z.dtype).expand_as(z)
            z = z + self.effective_eta(z, delta, config) * delta
        z = self.denoise(z, t_star)
        return self.decode(z).clamp(0.0, 1.0)


def generate_adversarial(x0, delta, config: AdversaryConfig, models: LatentDiffusion,
                         item_ids=None):
    """Adversarial image(s) for an ``ItemImage``/``ItemImages``/array; returns the same kind."""
    if isinstance(x0, ItemImage):
        out = generate_adversarial(ItemImages([x0.item_id], x0.pixels[None]), delta, config, models)
        return out[x0.item_id]
    if isinstance(x0, ItemImages):
        ids, pixels = list(x0.ids), x0.pixels
    else:
        pixels = check_images(x0)
        ids = list(item_ids) if item_ids is not None else [str(k) for k in range(len(pixels))]
    if config.ddim_steps != len(models.schedule.ddim_steps) - 1:
        models = models.with_steps(config.ddim_steps)
    d = getattr(delta, "delta", delta)
    if d is not None:
        d = torch.as_tensor(d, dtype=models.dtype)
        if tuple(d.shape[-3:]) != models.latent_shape:
            raise ValueError(f"perturbation shape {tuple(d.shape[-3:])} does not match latent {models.latent_shape}")
    with torch.no_grad():
        x = to_nchw(pixels, dtype=models.dtype)
        out = models.generate(x, d, config, models.noise_for(ids, config.seed))
    adv = to_nhwc(out).astype(np.float32)
    if isinstance(x0, ItemImages):
        return ItemImages(ids, adv, provenance="adversarial")
    return adv


def fit_diffusion(images, latent_shape=(4, 8, 8), schedule: DiffusionSchedule | None = None, vae_epochs=60,
                  unet_epochs=200, seed=0, vae_kwargs=None, unet_kwargs=None) -> LatentDiffusion:
    schedule = schedule or make_schedule()
    vae = train_vae(images, latent_shape, epochs=vae_epochs, seed=seed, **(vae_kwargs or {}))
    unet = train_unet(vae, images, schedule, epochs=unet_epochs, seed=seed, **(unet_kwargs or {}))
    return LatentDiffusion(vae, unet, schedule, {"seed": seed, "n_images": len(images)})


# ---------------------------------------------------------------------------
# checkpoints

def save_diffusion(models: LatentDiffusion, path) -> None:
    s = models.schedule
    torch.save({
        "format": DIFFUSION_FORMAT, "version": DIFFUSION_VERSION,
        "schedule": {"T": s.T, "beta_start": float(s.betas[1]), "beta_end": float(s.betas[-1]),
                     "ddim_steps": len(s.ddim_steps) - 1},
        "image_shape": models.vae.image_shape, "latent_shape": models.latent_shape,
        "vae_width": models.vae.width, "unet_width": models.unet.width, "vae": models.vae.state_dict(), "unet": models.unet.state_dict(),
        "meta": models.meta,
    }, path)


def load_diffusion(path) -> LatentDiffusion:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != DIFFUSION_FORMAT:
        raise ValueError(f"{path} is not a diffusion checkpoint")
    sc = blob["schedule"]
    schedule = make_schedule(sc["T"], sc["beta_start"], sc["beta_end"], sc["ddim_steps"])
    vae = VAE(blob["image_shape"], blob["latent_shape"], blob["vae_width"])
    vae.load_state_dict(blob["vae"])
    unet = NoisePredictor(blob["latent_shape"], blob["unet_width"])
    unet.load_state_dict(blob["unet"])
    return LatentDiffusion(_freeze(vae), _freeze(unet), schedule, blob.get("meta", {}))
