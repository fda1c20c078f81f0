"""Black-box threat model: what the attack stage is allowed to read.

The attacker gets an ``AttackerView``: the observed users' warm-item edges as
its own interaction graph, plus images of the target items and of items that
appear in observed edges.  Everything else it might be handed (the victim
model, the full interaction graph) is wrapped in an ``AuditedProxy``; any
attribute access on a proxy is logged as a forbidden read.
"""
from __future__ import annotations

import os
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Dataset, InteractionGraph, ItemImages, ObservedView


@dataclass
class AccessRecord:
    resource: str
    key: str
    allowed: bool


@dataclass
class AccessAudit:
    log: list = field(default_factory=list)
    strict: bool = True

    def record(self, resource: str, key: str, allowed: bool) -> None:
        self.log.append(AccessRecord(resource, key, allowed))
        if not allowed and self.strict:
            raise PermissionError(f"attack stage read forbidden {resource}: {key}")

    @property
    def forbidden(self) -> list:
        return [r for r in self.log if not r.allowed]

    @property
    def n_reads(self) -> int:
        return len(self.log)


class AuditedImages:
    """Read-only image store that logs every item read against an allow-list."""

    def __init__(self, images: ItemImages, allowed, audit: AccessAudit):
        self._images = images
        self._allowed = frozenset(allowed)
        self._audit = audit

    @property
    def allowed_ids(self) -> list:
        return sorted(self._allowed)

    @property
    def shape(self) -> tuple:
        return self._images.shape

    def __contains__(self, item_id) -> bool:
        return item_id in self._allowed and item_id in self._images

    def _check(self, item_ids):
        for i in item_ids:
            self._audit.record("image", str(i), i in self._allowed)

    def stack(self, item_ids) -> np.ndarray:
        item_ids = list(item_ids)
        self._check(item_ids)
        return self._images.stack(item_ids)

    def subset(self, item_ids) -> ItemImages:
        item_ids = list(item_ids)
        self._check(item_ids)
        return self._images.subset(item_ids)

    def __getitem__(self, item_id):
        self._check([item_id])
        return self._images[item_id]


class AuditedProxy:
    """Wraps an object the attacker must not touch; every attribute read is forbidden."""

    def __init__(self, target, name: str, audit: AccessAudit):
        object.__setattr__(self, "_target", target)
        object.__setattr__(self, "_name", name)
        object.__setattr__(self, "_audit", audit)

    def __getattr__(self, attr):
        audit = object.__getattribute__(self, "_audit")
        audit.record(object.__getattribute__(self, "_name"), attr, False)
        return getattr(object.__getattribute__(self, "_target"), attr)

    def __setattr__(self, attr, value):
        audit = object.__getattribute__(self, "_audit")
        audit.record(object.__getattribute__(self, "_name"), f"set {attr}", False)
        setattr(object.__getattribute__(self, "_target"), attr, value)


@dataclass
class AttackerView:
    graph: InteractionGraph  # observed users x full item catalogue, observed edges only
    images: AuditedImages
    targets: tuple
    p: float
    audit: AccessAudit

    @property
    def visible_items(self) -> list:
        return self.images.allowed_ids


def make_attacker_view(dataset: Dataset, observed: ObservedView, targets, audit: AccessAudit | None = None,
                       train_graph: InteractionGraph | None = None) -> AttackerView:
    """Build the attacker's view from the observation sample.

    ``train_graph`` defaults to the dataset graph; ``observed.edges`` index into it.
    """
    audit = audit or AccessAudit()
    g = train_graph or dataset.graph
    users = [g.users[u] for u in observed.users]
    pairs = [(g.users[u], g.items[i]) for u, i in observed.edges]
    graph = InteractionGraph.from_pairs(pairs, users=users, items=g.items)
    allowed = set(targets) | {g.items[i] for i in observed.items}
    images = AuditedImages(dataset.images, allowed, audit)
    return AttackerView(graph, images, tuple(targets), observed.p, audit)


_GUARDS: list = []
_HOOKED = False


def _open_hook(event, args):
    if event != "open" or not _GUARDS or not args or not isinstance(args[0], (str, bytes, os.PathLike)):
        return
    path = Path(os.fsdecode(args[0])).resolve()
    roots, audit = _GUARDS[-1]
    for root in roots:
        if path == root or root in path.parents:
            audit.record("file", str(path), False)
    # other files (library code, the backbone checkpoint) are not tracked


@contextmanager
def guard_files(roots, audit: AccessAudit):
    """Log opening any file under ``roots`` as a forbidden read while the block runs."""
    global _HOOKED
    if not _HOOKED:
        sys.addaudithook(_open_hook)
        _HOOKED = True
    _GUARDS.append(([Path(r).resolve() for r in roots], audit))
    try:
        yield audit
    finally:
        _GUARDS.pop()
