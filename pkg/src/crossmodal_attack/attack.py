"""The cross-modal item attack: learn one latent perturbation per attack from observed preferences.

Fitting touches only an ``AttackerView``.  The attacker pretrains two small
encoders on disjoint halves of the images it can see (a semantic stand-in and
an alignment extractor), learns fused user preferences on the observed edges,
and trains the perturbation generator through the frozen diffusion backbone.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.linear_model import Ridge
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from ._validation import check_finite_loss, check_images, to_nchw, to_nhwc
from .dataset import ItemImages
from .diffusion import AdversaryConfig, LatentDiffusion
from .encoders import FeatureEncoder
from .losses import LossComponents, LossWeights, total_loss
from .perturbation import PerturbationGenerator, generate_delta, init_generator
from .preference import PreferenceModel
from .threat import AttackerView

AGGREGATIONS = ("mean", "per_user")
ALIGN_HEADS = ("projection", "regression", "joint")


class UnitNorm(nn.Module):
    """Wrap an encoder so its embeddings lie on the unit sphere."""

    def __init__(self, encoder):
        super().__init__()
        self.encoder = encoder

    def forward(self, x):
        return F.normalize(self.encoder(x), dim=1)


def ridge_head(features: np.ndarray, targets: np.ndarray, alpha: float = 1.0) -> nn.Linear:
    """Linear map from image features to preference space, fitted by ridge and frozen."""
    reg = Ridge(alpha=alpha).fit(features, targets)
    head = nn.Linear(features.shape[1], targets.shape[1]).double()
    with torch.no_grad():
        head.weight.copy_(torch.as_tensor(reg.coef_))
        head.bias.copy_(torch.as_tensor(np.broadcast_to(reg.intercept_, (targets.shape[1],))))
    for p in head.parameters():
        p.requires_grad_(False)
    return head


def attack_loss(generator: PerturbationGenerator, e_u: torch.Tensor, x0: torch.Tensor, noise: torch.Tensor,
                models: LatentDiffusion, config: AdversaryConfig, weights: LossWeights,
                components: LossComponents, align_to: torch.Tensor | None = None):
    """Composite loss of the generator's perturbation applied to a batch of target images.

    ``e_u`` is one embedding (shared perturbation) or one per image.
    """
    delta = generator(e_u)
    if delta.shape[0] == 1:
        delta = delta.expand(len(x0), *delta.shape[1:])
    x_adv = models.generate(x0, delta, config, noise)
    target = e_u if align_to is None else align_to
    return total_loss(x0, x_adv, target, weights, components)


class _Head(nn.Module):
    def __init__(self, linear):
        super().__init__()
        self.linear = linear

    def forward(self, f):
        return self.linear(f.to(self.linear.weight.dtype))


class CrossModalAttack(BaseEstimator):
    """Estimator wrapper around the whole attacker side.

    ``fit(view, models)`` learns the perturbation; ``transform(images, ids)``
    returns adversarial versions of the given target images.
    """

    def __init__(self, eta=0.1, ddim_steps=50, inject_step=None, adaptive_eta=True,
                 clip_weight=1.0, ssim_weight=1.0, align_weight=0.5,
                 pref_dim=64, pref_layers=3, affinity_k=10, pref_epochs=60,
                 encoder_dim=64, encoder_epochs=20, heads=4, steps=60, lr=1e-3, batch_users=16,
                 aggregation="mean", align_head="joint", ridge_alpha=1.0, seed=0):
        self.eta = eta
        self.ddim_steps = ddim_steps
        self.inject_step = inject_step
        self.adaptive_eta = adaptive_eta
        self.clip_weight = clip_weight
        self.ssim_weight = ssim_weight
        self.align_weight = align_weight
        self.pref_dim = pref_dim
        self.pref_layers = pref_layers
        self.affinity_k = affinity_k
        self.pref_epochs = pref_epochs
        self.encoder_dim = encoder_dim
        self.encoder_epochs = encoder_epochs
        self.heads = heads
        self.steps = steps
        self.lr = lr
        self.batch_users = batch_users
        self.aggregation = aggregation
        self.align_head = align_head
        self.ridge_alpha = ridge_alpha
        self.seed = seed

    @property
    def adversary_config(self) -> AdversaryConfig:
        return AdversaryConfig(self.eta, self.inject_step, self.ddim_steps, self.seed, self.adaptive_eta)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.clip_weight, self.ssim_weight, self.align_weight)

    def _check_params(self):
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")
        if self.align_head not in ALIGN_HEADS:
            raise ValueError(f"align_head must be one of {ALIGN_HEADS}, got {self.align_head!r}")
        # building these validates eta, the step count and the loss weights
        self.adversary_config
        self.weights

    def fit_components(self, view: AttackerView):
        """Encoders, preference model and alignment head (everything before the generator)."""
        self._check_params()
        rng = np.random.default_rng(self.seed)
        visible = list(view.visible_items)
        if len(visible) < 4:
            raise ValueError(f"attacker sees only {len(visible)} images; need at least 4")
        pixels = view.images.stack(visible)
        order = rng.permutation(len(visible))
        half = len(visible) // 2
        semantic = FeatureEncoder(d_f=self.encoder_dim, epochs=self.encoder_epochs, seed=self.seed + 1)
        semantic.fit(pixels[order[:half]])
        extractor = FeatureEncoder(d_f=self.encoder_dim, epochs=self.encoder_epochs, seed=self.seed + 2)
        extractor.fit(pixels[order[half:]])

        graph = view.graph
        feats = np.zeros((graph.n_items, self.encoder_dim))
        vis_idx = np.array([graph.item_index(i) for i in visible])
        feats[vis_idx] = extractor.transform(pixels)
        mask = np.zeros(graph.n_items, bool)
        mask[vis_idx] = True
        pref = PreferenceModel(dim=self.pref_dim, layers=self.pref_layers, affinity_k=self.affinity_k,
                               epochs=self.pref_epochs, seed=self.seed).fit(graph, feats, mask)

        warm = vis_idx[graph.item_degree()[vis_idx] > 0]
        if self.align_head == "projection":
            head = copy.deepcopy(pref.net_.project)
            for p in head.parameters():
                p.requires_grad_(False)
        elif self.align_head == "regression":
            if len(warm) < 2:
                raise ValueError("alignment head needs at least two observed items with images")
            head = ridge_head(feats[warm], pref.item_embeddings_[warm], self.ridge_alpha)
        else:
            # warm start from the preference projection; fit() keeps training it with the generator
            head = copy.deepcopy(pref.net_.project).double()
            for p in head.parameters():
                p.requires_grad_(True)
        self.semantic_ = semantic
        self.extractor_ = extractor
        self.preference_ = pref
        self.head_ = _Head(head)
        self.components_ = LossComponents(UnitNorm(semantic), extractor, self.head_)
        return self

    def user_embeddings(self) -> np.ndarray:
        return self.preference_.user_embeddings_

    def fit(self, view: AttackerView, models: LatentDiffusion):
        self.fit_components(view)
        config = self.adversary_config
        if config.ddim_steps != len(models.schedule.ddim_steps) - 1:
            models = models.with_steps(config.ddim_steps)
        targets = list(view.targets)
        x0 = to_nchw(view.images.stack(targets))
        noise = models.noise_for(targets, self.seed)
        users = torch.as_tensor(self.user_embeddings(), dtype=torch.float32)
        e_mean = users.mean(0)
        gen = init_generator(self.seed, users.shape[1], models.latent_shape, self.heads)
        params = list(gen.parameters())
        if self.align_head == "joint":
            params += list(self.head_.parameters())
        opt = torch.optim.Adam(params, lr=self.lr)
        rng = torch.Generator().manual_seed(self.seed)
        weights = self.weights
        self.loss_curve_ = []
        # with no injection the generator cannot influence the output
        trainable = config.eta > 0 and (weights.clip or weights.ssim or weights.align)
        gen.train()
        for step in range(self.steps if trainable else 0):
            if self.aggregation == "mean":
                e_in, align_to = e_mean[None], e_mean
            else:
                pick = torch.randint(len(users), (len(targets),), generator=rng)
                e_in, align_to = users[pick], users[pick]
            loss, terms = attack_loss(gen, e_in, x0, noise, models, config, weights, self.components_, align_to)
            check_finite_loss(loss, f"generator training step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_curve_.append({"step": step, "total": loss.item(),
                                     **{k: float(v.detach()) for k, v in terms.items()}})
        gen.eval()
        self.generator_ = gen
        self.delta_ = generate_delta(gen, e_mean, source="mean")
        self.targets_ = tuple(targets)
        return self

    def transform(self, images, item_ids=None, models: LatentDiffusion | None = None) -> ItemImages:
        check_is_fitted(self, "delta_")
        if models is None:
            raise ValueError("transform needs the diffusion backbone")
        if isinstance(images, ItemImages):
            item_ids, pixels = list(images.ids), images.pixels
        else:
            pixels = check_images(images)
            item_ids = list(item_ids)
        config = self.adversary_config
        if config.ddim_steps != len(models.schedule.ddim_steps) - 1:
            models = models.with_steps(config.ddim_steps)
        with torch.no_grad():
            out = models.generate(to_nchw(pixels, models.dtype), self.delta_.delta[None].to(models.dtype),
                                  config, models.noise_for(item_ids, self.seed))
        return ItemImages(item_ids, to_nhwc(out).astype(np.float32), provenance="adversarial")

    def surrogate_score(self, x: torch.Tensor) -> torch.Tensor:
        """Attacker's own differentiable estimate of how much observed users like image x."""
        e = torch.as_tensor(self.user_embeddings().mean(0))
        return self.head_(self.extractor_(x)) @ e.to(torch.float64)
