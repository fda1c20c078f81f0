"""High-order user preference modelling.

Two views are combined into one user vector:

* user-item view: LightGCN propagation over the interaction graph followed
  by a layer mean;
* item-item view: a KNN-sparsified cosine affinity graph over raw item visual
  features, used to smooth those features, which are then pooled per user
  with the same symmetric degree normalisation and projected to the ID
  dimension.

The helpers accept numpy arrays or torch tensors and return the same kind.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._validation import check_finite_loss, check_matrix, check_positive_int, seeded_generator
from .dataset import InteractionGraph
from .victim import sample_negatives

VIEWS = ("id", "visual", "fused")


@dataclass
class EmbeddingTable:
    ids: tuple
    vectors: np.ndarray
    view: str = "id"
    layer: int | None = None

    def __post_init__(self):
        self.vectors = check_matrix(self.vectors, "vectors")
        if len(self.ids) != len(self.vectors):
            raise ValueError(f"{len(self.ids)} ids for {len(self.vectors)} vectors")
        if self.view not in VIEWS:
            raise ValueError(f"view must be one of {VIEWS}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class AffinityGraph:
    """Normalised item-item affinity.

    ``similarity`` is the dense cosine matrix s, ``sparsified`` keeps the
    top-K entries per row (diagonal excluded) and ``matrix`` is
    D^-1/2 S~ D^-1/2 with D the row sums of S~.
    """

    matrix: sp.csr_matrix
    k: int
    similarity: np.ndarray
    sparsified: sp.csr_matrix


def _as_torch(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), True


def _back(x: torch.Tensor, was_numpy: bool):
    return x.detach().numpy() if was_numpy else x


def _edge_coefficients(graph: InteractionGraph, dtype=torch.float64):
    du = graph.user_degree().astype(np.float64)
    di = graph.item_degree().astype(np.float64)
    u, i = graph.edges[:, 0], graph.edges[:, 1]
    coef = 1.0 / np.sqrt(du[u] * di[i]) if len(u) else np.zeros(0)
    return (torch.tensor(u, dtype=torch.long), torch.tensor(i, dtype=torch.long),
            torch.as_tensor(coef, dtype=dtype))


def _propagate_once(u, i, coef, users, items):
    nu = torch.zeros_like(users).index_add(0, u, coef[:, None] * items[i])
    ni = torch.zeros_like(items).index_add(0, i, coef[:, None] * users[u])
    return nu, ni


def lightgcn_propagate(graph: InteractionGraph, user_emb, item_emb, layers: int) -> list:
    """Per-layer ``(users, items)`` embeddings for layers 0..K.

    Layer k sums neighbour embeddings of layer k-1 weighted by
    1/sqrt(|N_u| |N_i|).  Isolated nodes become zero from layer 1 on.
    """
    check_positive_int(layers, "layers", allow_zero=True)
    users, np_in = _as_torch(user_emb)
    items, _ = _as_torch(item_emb)
    if users.shape[0] != graph.n_users or items.shape[0] != graph.n_items:
        raise ValueError("embedding tables must cover every user and item of the graph")
    u, i, coef = _edge_coefficients(graph, users.dtype)
    out = [(users, items)]
    for _ in range(layers):
        users, items = _propagate_once(u, i, coef, users, items)
        out.append((users, items))
    return [(_back(a, np_in), _back(b, np_in)) for a, b in out]


def layer_average(per_layer: list):
    if not per_layer:
        raise ValueError("need at least the layer-0 table")
    shapes = {tuple(t.shape) for t in per_layer}
    if len(shapes) != 1:
        raise ValueError(f"layer tables disagree in shape: {sorted(shapes)}")
    if isinstance(per_layer[0], torch.Tensor):
        return torch.stack(per_layer).mean(0)
    return np.mean(np.stack([np.asarray(t, dtype=np.float64) for t in per_layer]), axis=0)


def cosine_similarity_matrix(features, item_ids=None) -> np.ndarray:
    f = check_matrix(features, "features")
    norms = np.linalg.norm(f, axis=1)
    bad = np.flatnonzero(norms == 0)
    if len(bad):
        name = item_ids[bad[0]] if item_ids is not None else int(bad[0])
        raise ValueError(f"item {name!r} has a zero-norm feature vector")
    fn = f / norms[:, None]
    return np.clip(fn @ fn.T, -1.0, 1.0)


def build_affinity(features, K: int, item_ids=None) -> AffinityGraph:
    s = cosine_similarity_matrix(features, item_ids)
    n = len(s)
    K = check_positive_int(K, "K", allow_zero=True)
    if K >= n:
        raise ValueError(f"K={K} must be smaller than the number of items ({n})")
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    rows, cols, vals = [], [], []
    for a in range(n):
        top = np.argsort(-masked[a], kind="stable")[:K]
        rows.extend([a] * len(top))
        cols.extend(top.tolist())
        vals.extend(s[a, top].tolist())
    sparsified = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    deg = np.asarray(sparsified.sum(axis=1)).ravel()
    # rows whose retained similarities sum to <= 0 have no valid D^-1/2; they
    # (and their columns) are zeroed
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    norm = sp.diags(inv) @ sparsified @ sp.diags(inv)
    norm = sp.csr_matrix(norm)
    norm.eliminate_zeros()
    return AffinityGraph(norm, K, s, sparsified)


def enhance_visual(affinity, raw, hops: int):
    """Apply E <- S E ``hops`` times."""
    check_positive_int(hops, "hops", allow_zero=True)
    mat = affinity.matrix if isinstance(affinity, AffinityGraph) else affinity
    if mat.shape[0] != len(raw):
        raise ValueError("affinity and raw feature table are indexed differently")
    if isinstance(raw, torch.Tensor):
        dense = torch.as_tensor(mat.toarray() if sp.issparse(mat) else mat, dtype=raw.dtype)
        out = raw
        for _ in range(hops):
            out = dense @ out
        return out
    out = np.asarray(raw, dtype=np.float64)
    for _ in range(hops):
        out = mat @ out
    return np.asarray(out)


def aggregate_user_visual(graph: InteractionGraph, item_visual, projection=None):
    """Sum of neighbouring items' visual vectors over sqrt(|N_u| |N_i|).

    ``projection`` (a callable, e.g. ``nn.Linear``) maps the result into the
    ID-embedding space.  Users without edges get zero before projection.
    """
    items, np_in = _as_torch(item_visual)
    if items.shape[0] != graph.n_items:
        raise ValueError("item_visual must cover every item of the graph")
    u, i, coef = _edge_coefficients(graph, items.dtype)
    users = torch.zeros(graph.n_users, items.shape[1], dtype=items.dtype).index_add(0, u, coef[:, None] * items[i])
    if projection is not None:
        users = projection(users)
    return _back(users, np_in)


def fuse(e_id, e_v):
    if tuple(e_id.shape) != tuple(e_v.shape):
        raise ValueError(f"cannot fuse tables of shape {tuple(e_id.shape)} and {tuple(e_v.shape)}")
    return e_id + e_v


def export_embeddings(table: EmbeddingTable, path) -> None:
    """Text export: a ``# dim=<d> view=<view> layer=<k>`` header, then ``id<TAB>v1 v2 ...``."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# dim={table.dim} view={table.view} layer={table.layer}\n")
        for ident, vec in zip(table.ids, table.vectors):
            fh.write(ident + "\t" + " ".join(repr(float(v)) for v in vec) + "\n")


def read_embeddings(path) -> EmbeddingTable:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(kv.split("=", 1) for kv in header)
        ids, rows = [], []
        for line in fh:
            ident, vec = line.rstrip("\n").split("\t")
            ids.append(ident)
            rows.append([float(v) for v in vec.split()])
    layer = None if meta.get("layer") in (None, "None") else int(meta["layer"])
    vectors = np.array(rows, dtype=np.float64).reshape(-1, int(meta["dim"]))
    return EmbeddingTable(tuple(ids), vectors, meta["view"], layer)


class _PreferenceNet(nn.Module):
    def __init__(self, n_users, n_items, dim, d_f, gen):
        super().__init__()
        self.user0 = nn.Parameter(0.1 * torch.randn(n_users, dim, generator=gen, dtype=torch.float64))
        self.item0 = nn.Parameter(0.1 * torch.randn(n_items, dim, generator=gen, dtype=torch.float64))
        self.project = nn.Linear(d_f, dim, bias=False).double()
        with torch.no_grad():
            self.project.weight.copy_(torch.randn(dim, d_f, generator=gen, dtype=torch.float64) / np.sqrt(d_f) * 0.1)


class PreferenceModel(BaseEstimator, TransformerMixin):
    """Fused user preference embeddings trained with BPR.

    ``fit(graph, features)`` takes the (attacker-observed) interaction graph and
    a raw visual feature row per item; rows of items whose image is not
    available may be given as zeros via ``feature_mask``.  ``transform`` maps
    user indices or ids to fused embeddings e_u.
    """

    def __init__(self, dim=64, layers=3, affinity_k=10, hops=1, epochs=100, lr=0.01,
                 batch_size=256, reg=1e-3, seed=0):
        self.dim = dim
        self.layers = layers
        self.affinity_k = affinity_k
        self.hops = hops
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.reg = reg
        self.seed = seed

    def fit(self, graph: InteractionGraph, features, feature_mask=None):
        if graph.n_edges == 0:
            raise ValueError("preference training needs a non-empty training split")
        feats = check_matrix(features, "features")
        if len(feats) != graph.n_items:
            raise ValueError("need one feature row per item")
        mask = np.ones(graph.n_items, bool) if feature_mask is None else np.asarray(feature_mask, bool)
        visible = np.flatnonzero(mask)
        k = min(self.affinity_k, len(visible) - 1)
        enhanced = np.zeros_like(feats)
        if k > 0:
            self.affinity_ = build_affinity(feats[visible], k, [graph.items[v] for v in visible])
            enhanced[visible] = enhance_visual(self.affinity_, feats[visible], self.hops)
        else:
            self.affinity_ = None
            enhanced[visible] = feats[visible]
        self.graph_ = graph
        self.item_visual_ = torch.as_tensor(enhanced)
        gen = seeded_generator(self.seed)
        torch.manual_seed(self.seed)
        self.net_ = _PreferenceNet(graph.n_users, graph.n_items, self.dim, feats.shape[1], gen)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        pos = torch.tensor(graph.edges, dtype=torch.long)
        vocab = torch.as_tensor(np.unique(graph.edges[:, 1]), dtype=torch.long)
        seen = set(map(tuple, graph.edges.tolist()))
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            perm = torch.randperm(len(pos), generator=gen)
            total = 0.0
            for start in range(0, len(pos), self.batch_size):
                batch = pos[perm[start:start + self.batch_size]]
                u, i = batch[:, 0], batch[:, 1]
                j = sample_negatives(u, vocab, seen, gen)
                # e_{u,v} is recomputed every step because the projection trains
                eu, ei = self._embeddings()
                diff = (eu[u] * ei[i]).sum(-1) - (eu[u] * ei[j]).sum(-1)
                reg = (self.net_.user0[u] ** 2).sum() + (self.net_.item0[i] ** 2).sum() + (self.net_.item0[j] ** 2).sum()
                loss = -F.logsigmoid(diff).mean() + self.reg * reg / len(u)
                check_finite_loss(loss, f"preference training epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(u)
            self.loss_curve_.append(total / len(pos))
        with torch.no_grad():
            eu, ei = self._embeddings()
            self.user_embeddings_ = eu.numpy()
            self.item_embeddings_ = ei.numpy()
        return self

    def _embeddings(self):
        net = self.net_
        per_layer = lightgcn_propagate(self.graph_, net.user0, net.item0, self.layers)
        eu_id = layer_average([p[0] for p in per_layer])
        ei_id = layer_average([p[1] for p in per_layer])
        eu_v = aggregate_user_visual(self.graph_, self.item_visual_, net.project)
        ei_v = net.project(self.item_visual_)
        return fuse(eu_id, eu_v), fuse(ei_id, ei_v)

    def _user_indices(self, users):
        out = []
        for u in np.atleast_1d(users):
            out.append(self.graph_.user_index(u) if isinstance(u, str) else int(u))
        return np.array(out, dtype=np.int64)

    def transform(self, users) -> np.ndarray:
        check_is_fitted(self, "user_embeddings_")
        return self.user_embeddings_[self._user_indices(users)]

    def embed_user(self, user) -> np.ndarray:
        return self.transform([user])[0]

    def score_matrix(self) -> np.ndarray:
        return self.user_embeddings_ @ self.item_embeddings_.T

    def user_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.graph_.users, self.user_embeddings_, "fused")

    def auc(self, test: InteractionGraph, n_neg=100, seed=0) -> float:
        rng = np.random.default_rng(seed)
        scores = self.score_matrix()
        seen = self.graph_.adjacency().toarray() > 0
        vals = []
        for u, i in test.edges:
            cand = np.flatnonzero(~seen[u])
            cand = cand[cand != i]
            neg = rng.choice(cand, size=min(n_neg, len(cand)), replace=False)
            vals.append(np.mean(scores[u, i] > scores[u, neg]) + 0.5 * np.mean(scores[u, i] == scores[u, neg]))
        return float(np.mean(vals)) if vals else float("nan")


def train_preference(graph, features, seed=0, feature_mask=None, **config) -> PreferenceModel:
    return PreferenceModel(seed=seed, **config).fit(graph, features, feature_mask)
