"""Interaction graphs, item images, cold-start selection and splits.

Users and items are addressed by string ids on the outside and by dense
integer indices inside.  Item indices follow ascending item id, so "ties
broken by ascending id" and "ties broken by ascending index" coincide.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from PIL import Image

from ._validation import check_fraction, check_images, check_positive_int


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InteractionGraph:
    """Bipartite user-item graph with implicit (binary) feedback.

    ``edges`` holds ``(user_index, item_index)`` rows in record order with
    duplicates removed.  Every stored edge has label 1; absent pairs are 0.
    """

    users: tuple
    items: tuple
    edges: np.ndarray = field(repr=False)

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if len(edges):
            if edges.min() < 0 or edges[:, 0].max() >= len(self.users) or edges[:, 1].max() >= len(self.items):
                raise ValueError("edge references an unknown user or item")
        edges.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "items", tuple(self.items))

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, str]], users: Sequence[str] | None = None,
                   items: Sequence[str] | None = None) -> "InteractionGraph":
        pairs = [(str(u), str(i)) for u, i in pairs]
        if users is None:
            users = sorted({u for u, _ in pairs})
        if items is None:
            items = sorted({i for _, i in pairs})
        uidx = {u: k for k, u in enumerate(users)}
        iidx = {i: k for k, i in enumerate(items)}
        seen = set()
        rows = []
        for u, i in pairs:
            if u not in uidx or i not in iidx:
                raise ValueError(f"edge ({u}, {i}) references an unknown user or item")
            key = (uidx[u], iidx[i])
            if key not in seen:
                seen.add(key)
                rows.append(key)
        return cls(tuple(users), tuple(items), np.array(rows, dtype=np.int64).reshape(-1, 2))

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def user_index(self, user_id: str) -> int:
        try:
            return self._uidx[user_id]
        except KeyError:
            raise KeyError(f"unknown user {user_id!r}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._iidx[item_id]
        except KeyError:
            raise KeyError(f"unknown item {item_id!r}") from None

    @property
    def _uidx(self) -> dict:
        if "_uidx_cache" not in self.__dict__:
            object.__setattr__(self, "_uidx_cache", {u: k for k, u in enumerate(self.users)})
        return self.__dict__["_uidx_cache"]

    @property
    def _iidx(self) -> dict:
        if "_iidx_cache" not in self.__dict__:
            object.__setattr__(self, "_iidx_cache", {i: k for k, i in enumerate(self.items)})
        return self.__dict__["_iidx_cache"]

    def item_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 1], minlength=self.n_items)

    def user_degree(self) -> np.ndarray:
        return np.bincount(self.edges[:, 0], minlength=self.n_users)

    def degree(self, item_id: str) -> int:
        return int(self.item_degree()[self.item_index(item_id)])

    def label(self, user_id: str, item_id: str) -> int:
        u, i = self.user_index(user_id), self.item_index(item_id)
        return int(np.any((self.edges[:, 0] == u) & (self.edges[:, 1] == i)))

    def adjacency(self) -> sp.csr_matrix:
        """Binary ``n_users x n_items`` interaction matrix."""
        data = np.ones(len(self.edges), dtype=np.float64)
        return sp.csr_matrix((data, (self.edges[:, 0], self.edges[:, 1])),
                             shape=(self.n_users, self.n_items))

    def neighbors(self, user: int) -> np.ndarray:
        return self.edges[self.edges[:, 0] == user, 1]

    def edge_pairs(self) -> list[tuple[str, str]]:
        return [(self.users[u], self.items[i]) for u, i in self.edges]

    def with_edges(self, edges: np.ndarray) -> "InteractionGraph":
        """Same node sets, different edge list."""
        return InteractionGraph(self.users, self.items, edges)


@dataclass(frozen=True)
class ItemImage:
    item_id: str
    pixels: np.ndarray
    provenance: str = "original"


class ItemImages:
    """Item images stacked into one ``(N, H, W, C)`` float array."""

    def __init__(self, ids: Sequence[str], pixels, provenance: str = "original"):
        ids = tuple(str(i) for i in ids)
        if len(ids) == 0:
            pixels = np.zeros((0, 0, 0, 0), dtype=np.float32) if np.size(pixels) == 0 else pixels
            self.pixels = np.asarray(pixels, dtype=np.float32).reshape(0, *np.shape(pixels)[1:])
        else:
            self.pixels = check_images(pixels, "pixels")
        if len(ids) != len(self.pixels):
            raise ValueError(f"{len(ids)} ids for {len(self.pixels)} images")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item id in image collection")
        if provenance not in ("original", "adversarial"):
            raise ValueError(f"provenance must be 'original' or 'adversarial', got {provenance!r}")
        self.ids = ids
        self.provenance = provenance
        self._index = {i: k for k, i in enumerate(ids)}

    def __len__(self):
        return len(self.ids)

    def __contains__(self, item_id):
        return item_id in self._index

    def __getitem__(self, item_id: str) -> ItemImage:
        return ItemImage(item_id, self.pixels[self._index[item_id]], self.provenance)

    @property
    def shape(self) -> tuple:
        return tuple(self.pixels.shape[1:])

    def stack(self, item_ids: Sequence[str]) -> np.ndarray:
        try:
            return self.pixels[[self._index[i] for i in item_ids]]
        except KeyError as exc:
            raise KeyError(f"no image for item {exc.args[0]!r}") from None

    def subset(self, item_ids: Sequence[str]) -> "ItemImages":
        return ItemImages(item_ids, self.stack(item_ids), self.provenance)

    def replace(self, item_ids: Sequence[str], pixels: np.ndarray, provenance: str = "adversarial") -> "ItemImages":
        """Copy with the given items' pixels swapped in (e.g. adversarial versions)."""
        new = self.pixels.copy()
        new[[self._index[i] for i in item_ids]] = check_images(pixels)
        return ItemImages(self.ids, new, provenance)


@dataclass
class Dataset:
    graph: InteractionGraph
    images: ItemImages
    meta: dict = field(default_factory=dict)


@dataclass
class DatasetSplit:
    train: InteractionGraph
    test: InteractionGraph
    held_out_fraction: float


@dataclass
class ObservedView:
    """What a black-box attacker sees: a user sample and their warm-item edges."""

    users: np.ndarray
    edges: np.ndarray
    p: float
    cold_items: tuple = ()

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    @property
    def items(self) -> np.ndarray:
        """Items touched by at least one observed edge."""
        return np.unique(self.edges[:, 1])


# ---------------------------------------------------------------------------
# file IO

def load_interactions(path, image_dir) -> Dataset:
    path = Path(path)
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DataFormatError(f"{path}:{lineno}: expected 'user_id<TAB>item_id', got {line!r}")
            pairs.append((parts[0], parts[1]))
    graph = InteractionGraph.from_pairs(pairs)
    if graph.n_items == 0:
        return Dataset(graph, ItemImages([], np.zeros((0, 0, 0, 0), np.float32)))
    pixels = []
    for item in graph.items:
        fname = Path(image_dir) / f"{item}.png"
        if not fname.exists():
            raise FileNotFoundError(f"missing image for item {item!r}: {fname}")
        with Image.open(fname) as im:
            pixels.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    shapes = {p.shape for p in pixels}
    if len(shapes) != 1:
        raise DataFormatError(f"images must share one shape, found {sorted(shapes)}")
    return Dataset(graph, ItemImages(graph.items, np.stack(pixels)))


def save_png(path, pixels: np.ndarray, text: dict | None = None) -> None:
    from PIL.PngImagePlugin import PngInfo

    arr = np.clip(np.rint(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    info = None
    if text:
        info = PngInfo()
        for k, v in sorted(text.items()):
            info.add_text(k, str(v))
    Image.fromarray(arr).save(path, format="PNG", pnginfo=info)


def save_interactions(dataset: Dataset, path, image_dir) -> None:
    os.makedirs(image_dir, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in dataset.graph.edge_pairs():
            fh.write(f"{u}\t{i}\n")
    for item in dataset.images.ids:
        save_png(Path(image_dir) / f"{item}.png", dataset.images[item].pixels)


def write_split_manifest(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in split.test.edge_pairs():
            fh.write(f"{u}\t{i}\n")


def read_split_manifest(graph: InteractionGraph, path) -> DatasetSplit:
    held = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2:
                raise DataFormatError(f"{path}:{lineno}: malformed manifest line {line!r}")
            held.add((graph.user_index(parts[0]), graph.item_index(parts[1])))
    mask = np.array([(int(u), int(i)) in held for u, i in graph.edges], dtype=bool)
    if mask.sum() != len(held):
        raise DataFormatError(f"{path}: manifest lists pairs absent from the graph")
    return DatasetSplit(graph.with_edges(graph.edges[~mask]), graph.with_edges(graph.edges[mask]),
                        mask.sum() / max(graph.n_edges, 1))


# ---------------------------------------------------------------------------
# synthetic data

PALETTE = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.70, 0.20],
    [0.15, 0.25, 0.85],
    [0.90, 0.80, 0.10],
    [0.60, 0.20, 0.75],
    [0.10, 0.75, 0.75],
])


GREY = np.array([0.5, 0.5, 0.5])


def _render_item(rng: np.random.Generator, color: np.ndarray, size: int, channels: int,
                 radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    base = rng.uniform(0.72, 0.9)
    tilt = rng.uniform(-0.08, 0.08)
    background = base + tilt * (yy - 0.5)
    cy, cx = rng.uniform(0.35, 0.65, size=2)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    # soft disk edge, roughly 1.5 px wide
    mask = 1.0 / (1.0 + np.exp((dist - radius) * (size / 1.5)))
    img = np.empty((size, size, channels))
    for c in range(channels):
        img[..., c] = (1 - mask) * background + mask * color[c % len(color)]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(n_users: int, n_items: int, density: float, planted_attribute_strength: float,
                  seed: int, n_clusters: int = 4, image_size: int = 64, channels: int = 3,
                  affinity: float = 20.0, appeal: float = 4.0, popularity_sigma: float = 0.5) -> Dataset:
    """Planted-cluster interaction data with matching item images.

    Users belong to one of ``n_clusters`` clusters of geometrically shrinking
    size; items belong to one of the same number of groups and carry a
    salience ``a`` in [0.1, 1].  The chance that a user picks an item is
    proportional to

        popularity * (1 + appeal * a) * (1 + affinity * a * [same group])

    with log-normal popularity (log-scale ``popularity_sigma``): salient items appeal to everyone, and more so
    to their own cluster.  Each image is a soft disk on a light background;
    salience sets the disk size and how vivid its colour is, and the colour is
    ``strength * (a * palette[group] + (1 - a) * grey) + (1 - strength) * random``
    so at strength 0 the pixels carry no information about the clusters.
    """
    check_positive_int(n_users, "n_users")
    check_positive_int(n_items, "n_items")
    check_positive_int(n_clusters, "n_clusters")
    check_fraction(density, "density", low_open=True)
    strength = check_fraction(planted_attribute_strength, "planted_attribute_strength")
    if n_clusters > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} clusters supported")
    rng = np.random.default_rng(seed)

    weights = 0.6 ** np.arange(n_clusters)
    weights /= weights.sum()
    user_cluster = rng.choice(n_clusters, size=n_users, p=weights)
    item_group = rng.permutation(np.arange(n_items) % n_clusters)
    popularity = rng.lognormal(0.0, popularity_sigma, size=n_items)
    salience = rng.uniform(0.1, 1.0, size=n_items)

    match = user_cluster[:, None] == item_group[None, :]
    pref = (popularity * (1.0 + appeal * salience))[None, :] * np.where(match, 1.0 + affinity * salience[None, :], 1.0)
    prob = pref * (density * n_users * n_items / pref.sum())
    prob = np.minimum(prob, 1.0)
    hits = rng.random((n_users, n_items)) < prob
    # record order: user-major, shuffled within user so "last" is not the highest item id
    rows = []
    for u in range(n_users):
        its = np.flatnonzero(hits[u])
        rows.extend((u, i) for i in rng.permutation(its))
    edges = np.array(rows, dtype=np.int64).reshape(-1, 2)

    width = max(4, len(str(max(n_users, n_items) - 1)))
    users = tuple(f"u{k:0{width}d}" for k in range(n_users))
    items = tuple(f"i{k:0{width}d}" for k in range(n_items))

    pixels = np.empty((n_items, image_size, image_size, channels), dtype=np.float32)
    for i in range(n_items):
        random_colour = rng.uniform(0.05, 0.95, size=3)
        look = salience[i] * PALETTE[item_group[i]] + (1.0 - salience[i]) * GREY
        colour = strength * look + (1.0 - strength) * random_colour
        radius = 0.15 + 0.15 * salience[i] + rng.uniform(-0.02, 0.02)
        pixels[i] = _render_item(rng, colour, image_size, channels, radius)

    meta = {
        "user_cluster": user_cluster,
        "item_group": item_group,
        "popularity": popularity,
        "salience": salience,
        "seed": int(seed),
        "planted_attribute_strength": strength,
    }
    return Dataset(InteractionGraph(users, items, edges), ItemImages(items, pixels), meta)


# ---------------------------------------------------------------------------
# cold start, attacker view, splits

def select_cold_items(graph: InteractionGraph, K: int) -> list[str]:
    K = check_positive_int(K, "K", allow_zero=True)
    if K > graph.n_items:
        raise ValueError(f"K={K} exceeds the number of items ({graph.n_items})")
    order = np.argsort(graph.item_degree(), kind="stable")
    return [graph.items[i] for i in order[:K]]


def observe_users(graph: InteractionGraph, p: float, cold_items: Sequence[str], seed: int) -> ObservedView:
    p = check_fraction(p, "p")
    n_obs = math.floor(p * graph.n_users + 1e-9)
    rng = np.random.default_rng(seed)
    users = np.sort(rng.choice(graph.n_users, size=n_obs, replace=False)) if n_obs else np.zeros(0, np.int64)
    cold = np.array([graph.item_index(i) for i in cold_items], dtype=np.int64)
    keep = np.isin(graph.edges[:, 0], users) & ~np.isin(graph.edges[:, 1], cold)
    return ObservedView(users, graph.edges[keep], p, tuple(cold_items))


def split_leave_one_out(graph: InteractionGraph, target_test_fraction: float, seed: int) -> DatasetSplit:
    """Hold out each sampled user's last interaction, capped near the target fraction.

    Only users with at least two interactions are eligible.  The number of
    held-out edges is ``floor(fraction * |E|)`` or the number of eligible
    users, whichever is smaller.
    """
    frac = check_fraction(target_test_fraction, "target_test_fraction", low_open=True, high=0.5)
    deg = graph.user_degree()
    eligible = np.flatnonzero(deg >= 2)
    if len(eligible) == 0:
        warnings.warn("no user has two or more interactions; test split is empty", RuntimeWarning)
        return DatasetSplit(graph, graph.with_edges(np.zeros((0, 2), np.int64)), 0.0)
    budget = min(math.floor(frac * graph.n_edges + 1e-9), len(eligible))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(eligible)[:budget]
    # last edge of each user in record order
    last = np.full(graph.n_users, -1, dtype=np.int64)
    np.maximum.at(last, graph.edges[:, 0], np.arange(graph.n_edges))
    test_mask = np.zeros(graph.n_edges, dtype=bool)
    test_mask[last[chosen]] = True
    return DatasetSplit(graph.with_edges(graph.edges[~test_mask]), graph.with_edges(graph.edges[test_mask]),
                        test_mask.sum() / graph.n_edges)
