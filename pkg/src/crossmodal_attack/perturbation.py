"""User embedding -> latent perturbation generator.

    x      = BN(LeakyReLU_0.2(W1 e_u + b1))            in R^256
    tokens = reshape(x, 16 x 16); q = mean(tokens)
    z      = Attention(q, tokens, tokens)               in R^256
    y      = ReLU(W2 z + b2)
    delta  = reshape(Tanh(W3 y + b3), latent_shape)

The attention has ``heads`` heads with ``key_dim`` query/key width and a
value width of ``hidden / heads`` so the concatenated heads are 256-wide
before the output projection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._validation import check_positive_int

GENERATOR_VERSION = 1


class AttentionPool(nn.Module):
    """Single-query multi-head attention over a token sequence."""

    def __init__(self, token_dim, heads, key_dim, value_dim, out_dim):
        super().__init__()
        self.heads = heads
        self.key_dim = key_dim
        self.value_dim = value_dim
        self.q = nn.Linear(token_dim, heads * key_dim)
        self.k = nn.Linear(token_dim, heads * key_dim)
        self.v = nn.Linear(token_dim, heads * value_dim)
        self.out = nn.Linear(heads * value_dim, out_dim)
        self.last_weights = None

    def forward(self, query, tokens):
        b, n, _ = tokens.shape
        h = self.heads
        q = self.q(query).view(b, h, 1, self.key_dim)
        k = self.k(tokens).view(b, n, h, self.key_dim).transpose(1, 2)
        v = self.v(tokens).view(b, n, h, self.value_dim).transpose(1, 2)
        weights = torch.softmax(q @ k.transpose(-1, -2) / np.sqrt(self.key_dim), dim=-1)
        self.last_weights = weights.detach()
        z = (weights @ v).reshape(b, h * self.value_dim)
        return self.out(z)


class PerturbationGenerator(nn.Module):
    def __init__(self, d, latent_shape, hidden=256, heads=4, n_tokens=16, key_dim=16):
        super().__init__()
        latent_shape = tuple(int(s) for s in latent_shape)
        if len(latent_shape) != 3 or min(latent_shape) <= 0:
            raise ValueError(f"latent_shape must be three positive sizes, got {latent_shape}")
        if hidden % n_tokens:
            raise ValueError(f"hidden={hidden} is not divisible into {n_tokens} tokens")
        if hidden % heads:
            raise ValueError(f"heads={heads} does not divide the attention width {hidden}")
        self.d = d
        self.latent_shape = latent_shape
        self.hidden = hidden
        self.n_tokens = n_tokens
        self.fc1 = nn.Linear(d, hidden)
        self.act1 = nn.LeakyReLU(0.2)
        self.bn = nn.BatchNorm1d(hidden, momentum=0.1)
        self.attention = AttentionPool(hidden // n_tokens, heads, key_dim, hidden // heads, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, int(np.prod(latent_shape)))

    @property
    def volume(self) -> int:
        return int(np.prod(self.latent_shape))

    def forward(self, e_u: torch.Tensor) -> torch.Tensor:
        if e_u.ndim == 1:
            e_u = e_u[None]
        if e_u.shape[-1] != self.d:
            raise ValueError(f"user embedding has dimension {e_u.shape[-1]}, generator expects {self.d}")
        x = self.fc1(e_u)
        x = self.act1(x)
        if self.training and x.shape[0] == 1:
            # batch statistics are undefined for a single row: fall back to running stats
            x = nn.functional.batch_norm(x, self.bn.running_mean, self.bn.running_var, self.bn.weight,
                                         self.bn.bias, False, 0.0, self.bn.eps)
        else:
            x = self.bn(x)
        tokens = x.view(x.shape[0], self.n_tokens, self.hidden // self.n_tokens)
        q = tokens.mean(dim=1, keepdim=True)
        z = self.attention(q, tokens)
        y = torch.relu(self.fc2(z))
        delta = torch.tanh(self.fc3(y))
        return delta.view(-1, *self.latent_shape)


@dataclass
class LatentPerturbation:
    delta: torch.Tensor
    source: str = "mean"
    version: int = GENERATOR_VERSION

    @property
    def shape(self) -> tuple:
        return tuple(self.delta.shape)


def init_generator(seed: int, d: int, latent_shape, heads: int = 4, hidden: int = 256,
                   init_std: float = 0.02) -> PerturbationGenerator:
    """Fresh generator: N(0, init_std) weights, zero biases, identity batch norm."""
    check_positive_int(d, "d")
    torch.manual_seed(seed)
    gen = PerturbationGenerator(d, latent_shape, hidden=hidden, heads=heads)
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in gen.modules():
            if isinstance(module, nn.Linear):
                module.weight.copy_(init_std * torch.randn(module.weight.shape, generator=g))
                module.bias.zero_()
        gen.bn.reset_parameters()
        gen.bn.reset_running_stats()
    return gen


def generate_delta(gen: PerturbationGenerator, e_u, source: str = "mean") -> LatentPerturbation:
    """Inference-mode perturbation for one user embedding (or a batch)."""
    e = torch.as_tensor(np.asarray(e_u) if not isinstance(e_u, torch.Tensor) else e_u,
                        dtype=gen.fc1.weight.dtype)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            delta = gen(e)
    finally:
        gen.train(was_training)
    if tuple(delta.shape[1:]) != gen.latent_shape:
        raise AssertionError(f"generator produced {tuple(delta.shape[1:])}, expected {gen.latent_shape}")
    if e.ndim == 1:
        delta = delta[0]
    return LatentPerturbation(delta, source)


def save_generator(gen: PerturbationGenerator, path) -> None:
    torch.save({"format": "crossmodal-attack/generator", "version": GENERATOR_VERSION,
                "d": gen.d, "latent_shape": gen.latent_shape, "hidden": gen.hidden,
                "heads": gen.attention.heads, "state": gen.state_dict()}, path)


def load_generator(path) -> PerturbationGenerator:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != "crossmodal-attack/generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    gen = PerturbationGenerator(blob["d"], blob["latent_shape"], hidden=blob["hidden"], heads=blob["heads"])
    gen.load_state_dict(blob["state"])
    return gen.eval()


def save_delta(delta: LatentPerturbation, path) -> None:
    """Raw tensor dump for inspection (``.npy``)."""
    np.save(path, delta.delta.detach().cpu().numpy())
