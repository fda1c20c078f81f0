"""Experiment configuration: a nested YAML file mapped onto dataclasses.

Schema (every key optional; defaults below)::

    data:        source (synthetic | files), path, image_dir, n_users, n_items,
                 density, strength, image_size, seed, test_fraction
    victim:      kind (mf | vbpr | dvbpr | amr), dim, epochs, lr, reg,
                 encoder_dim, encoder_epochs, shortlist_size
    preference:  dim, layers, affinity_k, epochs
    diffusion:   latent_shape, T, beta_start, beta_end, vae_epochs,
                 unet_epochs, vae_width, unet_width, seed
    adversary:   eta, inject_step, ddim_steps, adaptive_eta
    loss:        clip, ssim, align, tradeoff
    attack:      steps, lr, heads, aggregation, align_head, encoder_dim,
                 encoder_epochs, ridge_alpha
    baseline:    enabled, steps
    cold_k, p, seeds, ks, out, cache_dir

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .victim import KINDS


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    source: str = "synthetic"
    path: str | None = None
    image_dir: str | None = None
    n_users: int = 150
    n_items: int = 240
    density: float = 0.05
    strength: float = 1.0
    image_size: int = 32
    seed: int = 0
    test_fraction: float = 0.1


@dataclass
class VictimSection:
    kind: str = "vbpr"
    dim: int = 64
    epochs: int = 40
    lr: float = 0.01
    reg: float = 0.01
    encoder_dim: int = 64
    encoder_epochs: int = 15
    shortlist_size: int = 100


@dataclass
class PreferenceSection:
    dim: int = 64
    layers: int = 3
    affinity_k: int = 10
    epochs: int = 60


@dataclass
class DiffusionSection:
    latent_shape: tuple = (4, 8, 8)
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    vae_epochs: int = 40
    unet_epochs: int = 300
    vae_width: int = 32
    unet_width: int = 64
    seed: int = 0


@dataclass
class AdversarySection:
    eta: float = 0.1
    inject_step: int | None = None
    ddim_steps: int = 50
    adaptive_eta: bool = True


@dataclass
class LossSection:
    clip: float = 1.0
    ssim: float = 1.0
    align: float = 0.5
    tradeoff: float = 1.0


@dataclass
class AttackSection:
    steps: int = 60
    lr: float = 1e-3
    heads: int = 4
    aggregation: str = "mean"
    align_head: str = "joint"
    encoder_dim: int = 64
    encoder_epochs: int = 20
    ridge_alpha: float = 1.0


@dataclass
class BaselineSection:
    enabled: bool = True
    steps: int = 10


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    victim: VictimSection = field(default_factory=VictimSection)
    preference: PreferenceSection = field(default_factory=PreferenceSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    adversary: AdversarySection = field(default_factory=AdversarySection)
    loss: LossSection = field(default_factory=LossSection)
    attack: AttackSection = field(default_factory=AttackSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    cold_k: int = 10
    p: float = 0.1
    seeds: list = field(default_factory=lambda: [0])
    ks: list = field(default_factory=lambda: [5, 10, 20])
    out: str = "runs/default"
    cache_dir: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"seeds must be distinct, got {self.seeds}")
        if not self.ks or any(int(k) < 1 for k in self.ks):
            raise ConfigError(f"ks must be positive integers, got {self.ks}")
        if not 0 < self.p <= 1:
            raise ConfigError(f"p must lie in (0, 1], got {self.p}")
        if self.cold_k < 1:
            raise ConfigError(f"cold_k must be >= 1, got {self.cold_k}")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {self.data.source!r}")
        if self.data.source == "files" and (not self.data.path or not self.data.image_dir):
            raise ConfigError("data.source 'files' needs data.path and data.image_dir")
        if self.victim.kind not in KINDS or self.victim.kind == "mf":
            raise ConfigError(f"victim.kind must be a visual model {KINDS[1:]}, got {self.victim.kind!r}")
        if self.adversary.ddim_steps < 1 or self.adversary.ddim_steps > self.diffusion.T:
            raise ConfigError(f"adversary.ddim_steps must lie in [1, {self.diffusion.T}]")
        if self.adversary.eta < 0:
            raise ConfigError(f"adversary.eta must be >= 0, got {self.adversary.eta}")
        if any(v < 0 for v in asdict(self.loss).values()):
            raise ConfigError("loss weights must be non-negative")
        if len(self.diffusion.latent_shape) != 3:
            raise ConfigError(f"diffusion.latent_shape must have 3 entries, got {self.diffusion.latent_shape}")

    # -- serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["diffusion"]["latent_shape"] = list(self.diffusion.latent_shape)
        return d

    def fingerprint(self) -> str:
        """Hash of everything that affects results (output locations excluded)."""
        d = self.to_dict()
        d.pop("out")
        d.pop("cache_dir")
        return digest(d)

    def section_fingerprint(self, *keys: str) -> str:
        d = self.to_dict()
        return digest({k: d[k] for k in keys})

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cache_path(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.out_dir / "cache"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    def override(self, key: str, value) -> "ExperimentConfig":
        """Copy with one dotted key replaced, e.g. ``override("adversary.ddim_steps", 25)``."""
        if key not in sweepable_keys():
            raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(sweepable_keys())}")
        d = self.to_dict()
        node = d
        *parents, leaf = key.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = _coerce(value, node[leaf])
        return from_dict(d)


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _coerce(value, like):
    if isinstance(value, str) and not isinstance(like, str):
        value = yaml.safe_load(value)
    if isinstance(like, bool) or like is None:
        return value
    if isinstance(like, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(like, float) and isinstance(value, int):
        return float(value)
    return value


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}
_SECTION_TYPES = {
    "data": DataSection, "victim": VictimSection, "preference": PreferenceSection,
    "diffusion": DiffusionSection, "adversary": AdversarySection, "loss": LossSection,
    "attack": AttackSection, "baseline": BaselineSection,
}


def sweepable_keys() -> list:
    keys = []
    for name, cls in _SECTION_TYPES.items():
        keys += [f"{name}.{f.name}" for f in fields(cls)]
    keys += ["cold_k", "p"]
    return keys


def from_dict(d: dict, base_dir=None) -> ExperimentConfig:
    d = copy.deepcopy(d or {})
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}; valid: {sorted(_SECTIONS)}")
    kwargs = {}
    for name, cls in _SECTION_TYPES.items():
        sub = d.pop(name, None) or {}
        if is_dataclass(sub):
            sub = asdict(sub)
        valid = {f.name for f in fields(cls)}
        bad = set(sub) - valid
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}; valid: {sorted(valid)}")
        kwargs[name] = cls(**sub)
    kwargs["diffusion"].latent_shape = tuple(int(v) for v in kwargs["diffusion"].latent_shape)
    kwargs.update(d)
    kwargs["seeds"] = [int(s) for s in kwargs.get("seeds", [0])]
    kwargs["ks"] = sorted(int(k) for k in kwargs.get("ks", [5, 10, 20]))
    if base_dir is not None:
        data = kwargs["data"]
        for attr in ("path", "image_dir"):
            v = getattr(data, attr)
            if v and not Path(v).is_absolute():
                setattr(data, attr, str(Path(base_dir) / v))
        for attr in ("out", "cache_dir"):
            v = kwargs.get(attr)
            if v and not Path(v).is_absolute():
                kwargs[attr] = str(Path(base_dir) / v)
    cfg = ExperimentConfig(**kwargs)
    if cfg.data.source == "files":
        for attr in ("path", "image_dir"):
            if not Path(getattr(cfg.data, attr)).exists():
                raise ConfigError(f"data.{attr} does not exist: {getattr(cfg.data, attr)}")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return from_dict(raw or {}, base_dir=path.parent)


def micro_config(out: str = "runs/micro", **overrides) -> ExperimentConfig:
    """Smallest end-to-end configuration: 10 users, 20 items, 8x8 images, 2 DDIM steps."""
    d = {
        "data": {"n_users": 10, "n_items": 20, "density": 0.3, "image_size": 8, "test_fraction": 0.2},
        "victim": {"dim": 8, "epochs": 5, "encoder_dim": 8, "encoder_epochs": 2, "shortlist_size": 10},
        "preference": {"dim": 8, "layers": 2, "affinity_k": 3, "epochs": 5},
        "diffusion": {"latent_shape": [2, 4, 4], "vae_epochs": 3, "unet_epochs": 3, "vae_width": 8,
                      "unet_width": 16},
        "adversary": {"eta": 0.5, "ddim_steps": 2},
        "attack": {"steps": 3, "encoder_dim": 8, "encoder_epochs": 2},
        "baseline": {"steps": 3},
        "cold_k": 3, "p": 0.5, "seeds": [0], "ks": [1, 3, 5], "out": out,
    }
    for k, v in overrides.items():
        d[k] = v
    return from_dict(d)
