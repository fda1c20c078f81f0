"""Visually-aware victim recommenders and two-stage serving.

Score of user ``u`` for item ``i``::

    r(u, i) = <gamma_u, gamma_i> + <theta_u, W f_i>

``kind="mf"`` drops the visual term (the BPR-MF shortlister).  ``"vbpr"``
uses frozen encoder features, ``"amr"`` additionally trains against
worst-case feature perturbations in a max-norm ball, and ``"dvbpr"`` is the
desk-scale stand-in for end-to-end DVBPR: VBPR whose encoder head is
fine-tuned jointly with the embeddings.
"""
from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_finite_loss, check_images, seeded_generator, to_nchw
from .dataset import InteractionGraph
from .encoders import FeatureEncoder, pretrain_encoder

KINDS = ("mf", "vbpr", "dvbpr", "amr")
CHECKPOINT_FORMAT = "crossmodal-attack/victim"
CHECKPOINT_VERSION = 1

__all__ = ["VictimRecommender", "train_victim", "score", "recommend_two_stage", "rank_users",
           "pretrain_encoder", "FeatureEncoder", "save_victim", "load_victim"]


def sample_negatives(u: torch.Tensor, vocab: torch.Tensor, seen: set, gen: torch.Generator) -> torch.Tensor:
    """One uniform negative per positive, drawn from the training item vocabulary.

    Items with no training interaction are never sampled, so they keep their
    random initial ID embedding.
    """
    j = vocab[torch.randint(0, len(vocab), (len(u),), generator=gen)]
    for _ in range(10):
        clash = torch.tensor([(a, b) in seen for a, b in zip(u.tolist(), j.tolist())])
        if not clash.any():
            break
        j[clash] = vocab[torch.randint(0, len(vocab), (int(clash.sum()),), generator=gen)]
    return j


class _Factors(nn.Module):
    def __init__(self, n_users, n_items, dim, d_f, visual, gen):
        super().__init__()
        self.gamma_u = nn.Parameter(0.1 * torch.randn(n_users, dim, generator=gen))
        self.gamma_i = nn.Parameter(0.1 * torch.randn(n_items, dim, generator=gen))
        if visual:
            self.theta_u = nn.Parameter(0.1 * torch.randn(n_users, dim, generator=gen))
            self.W = nn.Parameter(torch.randn(dim, d_f, generator=gen) / np.sqrt(d_f))
        else:
            self.theta_u = None
            self.W = None

    def forward(self, users, items, feats=None):
        r = (self.gamma_u[users] * self.gamma_i[items]).sum(-1)
        if self.theta_u is not None:
            r = r + (self.theta_u[users] * (feats @ self.W.T)).sum(-1)
        return r


class VictimRecommender(BaseEstimator):
    """BPR-trained recommender; see module docstring for the score.

    Parameters
    ----------
    kind : {"mf", "vbpr", "dvbpr", "amr"}
    encoder : FeatureEncoder or None
        Frozen visual feature extractor (required unless ``kind="mf"``).
    dim : int
        Embedding dimension d.
    amr_eps : float
        Max-norm radius of the AMR feature perturbation (normalized features).
    amr_weight : float
        Weight of the adversarial BPR term.
    """

    def __init__(self, kind="vbpr", encoder=None, dim=64, epochs=60, lr=0.01, batch_size=256,
                 reg=1e-4, amr_eps=0.05, amr_weight=1.0, amr_steps=1, seed=0):
        self.kind = kind
        self.encoder = encoder
        self.dim = dim
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.reg = reg
        self.amr_eps = amr_eps
        self.amr_weight = amr_weight
        self.amr_steps = amr_steps
        self.seed = seed

    # -- training ---------------------------------------------------------
    def fit(self, graph: InteractionGraph, images=None):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if graph.n_edges == 0:
            raise ValueError("training split is empty")
        visual = self.kind != "mf"
        if visual and (self.encoder is None or images is None):
            raise ValueError(f"kind={self.kind!r} needs an encoder and item images")
        gen = seeded_generator(self.seed)
        torch.manual_seed(self.seed)
        self.users_ = graph.users
        self.items_ = graph.items
        self._uidx = {u: k for k, u in enumerate(graph.users)}
        self._iidx = {i: k for k, i in enumerate(graph.items)}
        self.train_graph_ = graph
        d_f = self.encoder.output_dim if visual else 0
        self.factors_ = _Factors(graph.n_users, graph.n_items, self.dim, d_f, visual, gen)

        head_params = []
        trunk_out = None
        if visual:
            x = to_nchw(check_images(images))
            if self.kind == "dvbpr":
                self.encoder_ = copy.deepcopy(self.encoder)
                head = self.encoder_.network_.head
                for p in head.parameters():
                    p.requires_grad_(True)
                head_params = list(head.parameters())
                with torch.no_grad():
                    trunk_out = self.encoder_.network_.trunk(x)
            else:
                self.encoder_ = self.encoder
            with torch.no_grad():
                self.item_features_ = self.encoder_(x)
        else:
            self.encoder_ = None
            self.item_features_ = None

        opt = torch.optim.Adam([{"params": list(self.factors_.parameters())},
                                {"params": head_params, "lr": self.lr * 0.1}], lr=self.lr)
        pos = torch.tensor(graph.edges, dtype=torch.long)
        vocab = torch.as_tensor(np.unique(graph.edges[:, 1]), dtype=torch.long)
        seen = set(map(tuple, graph.edges.tolist()))
        self.loss_curve_ = []
        self.adv_max_norm_ = []
        adv_start = self.epochs // 2 if self.kind == "amr" else self.epochs
        for epoch in range(self.epochs):
            perm = torch.randperm(len(pos), generator=gen)
            total = 0.0
            for start in range(0, len(pos), self.batch_size):
                batch = pos[perm[start:start + self.batch_size]]
                u, i = batch[:, 0], batch[:, 1]
                j = sample_negatives(u, vocab, seen, gen)
                if self.kind == "dvbpr":
                    feats = self._dvbpr_features(trunk_out)
                else:
                    feats = self.item_features_
                loss = self._bpr(u, i, j, feats)
                if epoch >= adv_start:
                    loss = loss + self.amr_weight * self._adversarial_bpr(u, i, j, feats)
                check_finite_loss(loss, f"{self.kind} training epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch)
            self.loss_curve_.append(total / len(pos))
        for p in self.factors_.parameters():
            p.requires_grad_(False)
        if self.kind == "dvbpr":
            for p in head_params:
                p.requires_grad_(False)
            with torch.no_grad():
                self.item_features_ = self._dvbpr_features(trunk_out)
        return self

    def _dvbpr_features(self, trunk_out):
        enc = self.encoder_
        return (enc.network_.head(trunk_out) - enc.mean_) / enc.scale_

    def _bpr(self, u, i, j, feats, delta=None):
        fi = fj = None
        if feats is not None:
            fi, fj = feats[i], feats[j]
            if delta is not None:
                fi, fj = fi + delta[0], fj + delta[1]
        diff = self.factors_(u, i, fi) - self.factors_(u, j, fj)
        params = [self.factors_.gamma_u[u], self.factors_.gamma_i[i], self.factors_.gamma_i[j]]
        if self.factors_.theta_u is not None:
            params.append(self.factors_.theta_u[u])
        reg = sum((p ** 2).sum() for p in params) / len(u)
        return -F.logsigmoid(diff).mean() + self.reg * reg

    def _adversarial_bpr(self, u, i, j, feats):
        """BPR loss at the worst-case feature perturbation inside the eps max-norm ball."""
        eps = self.amr_eps
        fi, fj = feats[i].detach(), feats[j].detach()
        delta = [torch.zeros_like(fi), torch.zeros_like(fj)]
        step = eps / max(self.amr_steps, 1)
        for _ in range(self.amr_steps):
            di = delta[0].clone().requires_grad_(True)
            dj = delta[1].clone().requires_grad_(True)
            diff = self.factors_(u, i, fi + di) - self.factors_(u, j, fj + dj)
            adv = -F.logsigmoid(diff).mean()
            gi, gj = torch.autograd.grad(adv, [di, dj])
            delta = [(di + step * gi.sign()).clamp(-eps, eps).detach(),
                     (dj + step * gj.sign()).clamp(-eps, eps).detach()]
        self.adv_max_norm_.append(max(float(delta[0].abs().max()), float(delta[1].abs().max())))
        return self._bpr(u, i, j, feats, delta)

    # -- inference --------------------------------------------------------
    @property
    def n_items(self) -> int:
        return len(self.items_)

    def user_index(self, user) -> int:
        check_is_fitted(self, "factors_")
        if isinstance(user, (int, np.integer)):
            if not 0 <= user < len(self.users_):
                raise KeyError(f"unknown user index {user}")
            return int(user)
        try:
            return self._uidx[user]
        except KeyError:
            raise KeyError(f"unknown user {user!r}") from None

    def item_index(self, item) -> int:
        if isinstance(item, (int, np.integer)):
            return int(item)
        try:
            return self._iidx[item]
        except KeyError:
            raise KeyError(f"unknown item {item!r}") from None

    def item_features(self, images) -> torch.Tensor:
        """Victim-side features of (possibly adversarial) images."""
        if self.encoder_ is None:
            return None
        x = to_nchw(check_images(images))
        with torch.no_grad():
            if self.kind == "dvbpr":
                return self._dvbpr_features(self.encoder_.network_.trunk(x))
            return self.encoder_(x)

    def features_with(self, item_ids, images) -> torch.Tensor | None:
        """Full feature table with the listed items' images replaced."""
        if self.item_features_ is None:
            return None
        feats = self.item_features_.clone()
        if len(item_ids):
            feats[[self.item_index(i) for i in item_ids]] = self.item_features(images)
        return feats

    def score_matrix(self, users=None, features=None) -> np.ndarray:
        """Scores for ``users`` (indices; default all) against every item."""
        check_is_fitted(self, "factors_")
        f = self.factors_
        users = np.arange(len(self.users_)) if users is None else np.asarray(users)
        u = torch.as_tensor(users, dtype=torch.long)
        with torch.no_grad():
            s = f.gamma_u[u] @ f.gamma_i.T
            if f.theta_u is not None:
                feats = self.item_features_ if features is None else features
                s = s + f.theta_u[u] @ (feats @ f.W.T).T
        return s.double().numpy()

    def predict_score(self, user, item, feature=None) -> float:
        u, i = self.user_index(user), self.item_index(item)
        f = self.factors_
        with torch.no_grad():
            r = float(f.gamma_u[u] @ f.gamma_i[i])
            if f.theta_u is not None:
                feat = self.item_features_[i] if feature is None else torch.as_tensor(feature, dtype=f.W.dtype)
                r += float(f.theta_u[u] @ (f.W @ feat))
        return r

    def visual_gradient(self, user) -> np.ndarray:
        """d r(u, i) / d f_i, which is W^T theta_u for the linear visual term."""
        f = self.factors_
        if f.theta_u is None:
            return np.zeros(0)
        return (f.W.T @ f.theta_u[self.user_index(user)]).double().numpy()

    def auc(self, test: InteractionGraph, n_neg=100, seed=0) -> float:
        """Held-out AUC against sampled non-interacted items."""
        rng = np.random.default_rng(seed)
        scores = self.score_matrix()
        seen = self.train_graph_.adjacency().toarray() > 0
        hits, total = 0.0, 0
        for u, i in test.edges:
            cand = np.flatnonzero(~seen[u])
            cand = cand[cand != i]
            neg = rng.choice(cand, size=min(n_neg, len(cand)), replace=False)
            hits += np.mean(scores[u, i] > scores[u, neg]) + 0.5 * np.mean(scores[u, i] == scores[u, neg])
            total += 1
        return hits / max(total, 1)


def train_victim(kind, graph, images=None, encoder=None, seed=0, **config) -> VictimRecommender:
    return VictimRecommender(kind=kind, encoder=encoder, seed=seed, **config).fit(graph, images)


def score(model: VictimRecommender, user, item, feature=None) -> float:
    return model.predict_score(user, item, feature)


def _top(scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest scores, ties broken by ascending index."""
    order = np.argsort(-scores, kind="stable")
    return order[:n]


def recommend_two_stage(models, user, k, shortlist_size, features=None, exclude=None) -> list:
    """Shortlist with the BPR-MF model, re-rank with the victim, return top-k item ids.

    Items the user interacted with in the victim's training graph are never
    recommended.  ``shortlist_size`` is clamped to the number of candidates.
    """
    ranked = rank_users(models, [user], k, shortlist_size, features=features, exclude=exclude)
    victim = models[1]
    return [victim.items_[i] for i in ranked[0]]


def rank_users(models, users, k, shortlist_size, features=None, exclude=None) -> list[np.ndarray]:
    shortlister, victim = models
    if shortlist_size < k:
        raise ValueError(f"shortlist_size ({shortlist_size}) must be >= k ({k})")
    uidx = np.array([victim.user_index(u) for u in users], dtype=np.int64)
    stage1 = shortlister.score_matrix(uidx)
    stage2 = victim.score_matrix(uidx, features)
    if exclude is None:
        exclude = victim.train_graph_.adjacency()
    seen = exclude[uidx].toarray() > 0 if hasattr(exclude, "toarray") else np.asarray(exclude)[uidx]
    out = []
    for row in range(len(uidx)):
        candidates = np.flatnonzero(~seen[row])
        m = min(shortlist_size, len(candidates))
        short = candidates[_top(stage1[row, candidates], m)]
        short = np.sort(short)
        out.append(short[_top(stage2[row, short], min(k, m))])
    return out


def save_victim(model: VictimRecommender, path) -> None:
    check_is_fitted(model, "factors_")
    torch.save({"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                "kind": model.kind, "params": {k: v for k, v in model.get_params().items() if k != "encoder"},
                "model": model}, path)


def load_victim(path) -> VictimRecommender:
    blob = torch.load(path, weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a victim checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported victim checkpoint version {blob.get('version')}")
    return blob["model"]
