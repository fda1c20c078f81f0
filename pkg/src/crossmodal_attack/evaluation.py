"""Hit-ratio evaluation, reports, the pixel-space baseline and ablation plumbing."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import check_images, check_positive_int, to_nchw, to_nhwc
from .dataset import ItemImages
from .losses import attack_objective, ssim
from .victim import rank_users

KS = (5, 10, 20)


def hr_at_k(recommendations, target, k: int) -> float:
    """Fraction of users whose top-k list contains ``target``."""
    k = check_positive_int(k, "k")
    if len(recommendations) == 0:
        raise ValueError("hit ratio over an empty user set")
    hits = 0
    for row in recommendations:
        if len(row) > k:
            raise ValueError(f"recommendation list of length {len(row)} exceeds k={k}")
        hits += target in list(row)
    return hits / len(recommendations)


def hit_matrix(ranked: list, target_indices, ks=KS) -> dict:
    """{k: per-target HR} from per-user ranked index arrays (longest k first)."""
    target_indices = np.asarray(target_indices)
    out = {}
    for k in ks:
        hits = np.zeros(len(target_indices))
        for row in ranked:
            hits += np.isin(target_indices, row[:k])
        out[k] = hits / len(ranked)
    return out


# ---------------------------------------------------------------------------
# reports

def _num(v) -> str:
    """Shortest round-tripping text for a float (numpy scalars included)."""
    return repr(float(v))


@dataclass
class AttackReport:
    """Per-seed, per-target hit ratios and distortions for one attack variant.

    ``pre``/``post`` map k to arrays of shape (n_seeds, n_targets).
    """

    label: str
    targets: tuple
    seeds: tuple
    ks: tuple
    pre: dict
    post: dict | None = None
    ssim: np.ndarray | None = None
    l2: np.ndarray | None = None
    objective: np.ndarray | None = None
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.targets = tuple(self.targets)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ks = tuple(int(k) for k in self.ks)
        self.pre = {int(k): np.asarray(v, dtype=np.float64).reshape(len(self.seeds), -1) for k, v in self.pre.items()}
        if self.post is not None:
            self.post = {int(k): np.asarray(v, dtype=np.float64).reshape(len(self.seeds), -1)
                         for k, v in self.post.items()}
        for name in ("ssim", "l2"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64).reshape(len(self.seeds), -1))
        if self.objective is not None:
            self.objective = np.asarray(self.objective, dtype=np.float64).reshape(len(self.seeds))
        for table in [self.pre] + ([self.post] if self.post is not None else []):
            for k, v in table.items():
                if v.size and (v.min() < 0 or v.max() > 1):
                    raise ValueError(f"HR@{k} outside [0, 1]")

    @property
    def attacked(self) -> bool:
        return self.post is not None

    def mean_hr(self, k: int, which: str = "post") -> np.ndarray:
        """Per-seed mean over targets."""
        table = self.post if which == "post" else self.pre
        if table is None:
            raise ValueError("report has no post-attack values")
        return table[k].mean(axis=1)

    def distortion(self) -> np.ndarray:
        """Per-seed mean of 1 - SSIM over targets."""
        return (1.0 - self.ssim).mean(axis=1)

    def summary(self) -> dict:
        out = {"label": self.label, "n_seeds": len(self.seeds), "fingerprint": self.fingerprint}
        for k in self.ks:
            for which in ("pre", "post"):
                if which == "post" and not self.attacked:
                    continue
                v = self.mean_hr(k, which)
                out[f"hr@{k}_{which}_mean"] = float(v.mean())
                out[f"hr@{k}_{which}_std"] = float(v.std())
        if self.ssim is not None:
            out["ssim_mean"] = float(self.ssim.mean())
            out["ssim_std"] = float(self.ssim.mean(axis=1).std())
            out["l2_mean"] = float(self.l2.mean())
        if self.objective is not None:
            out["objective_mean"] = float(self.objective.mean())
            out["objective_std"] = float(self.objective.std())
        return out

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else a.tolist()
        return {
            "label": self.label, "targets": list(self.targets), "seeds": list(self.seeds), "ks": list(self.ks),
            "pre": {str(k): arr(v) for k, v in self.pre.items()},
            "post": None if self.post is None else {str(k): arr(v) for k, v in self.post.items()},
            "ssim": arr(self.ssim), "l2": arr(self.l2), "objective": arr(self.objective),
            "fingerprint": self.fingerprint, "meta": self.meta, "summary": self.summary(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        return cls(d["label"], d["targets"], d["seeds"], d["ks"], {int(k): v for k, v in d["pre"].items()},
                   None if d["post"] is None else {int(k): v for k, v in d["post"].items()},
                   d["ssim"], d["l2"], d["objective"], d.get("fingerprint", ""), d.get("meta", {}))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)

    CSV_COLUMNS = ["label", "fingerprint", "seed", "target", "k", "hr_pre", "hr_post", "ssim", "l2", "objective"]

    def _rows(self):
        for s, seed in enumerate(self.seeds):
            for t, target in enumerate(self.targets):
                for k in self.ks:
                    yield [self.label, self.fingerprint, seed, target, k, _num(self.pre[k][s, t]),
                           "" if self.post is None else _num(self.post[k][s, t]),
                           "" if self.ssim is None else _num(self.ssim[s, t]),
                           "" if self.l2 is None else _num(self.l2[s, t]),
                           "" if self.objective is None else _num(self.objective[s])]

    def to_csv(self, path) -> None:
        """Long format: one row per (seed, target, k)."""
        write_reports_csv([self], path)

    @classmethod
    def _from_rows(cls, rows) -> "AttackReport":
        seeds = list(dict.fromkeys(int(r["seed"]) for r in rows))
        targets = list(dict.fromkeys(r["target"] for r in rows))
        ks = sorted({int(r["k"]) for r in rows})
        si = {s: n for n, s in enumerate(seeds)}
        ti = {t: n for n, t in enumerate(targets)}
        shape = (len(seeds), len(targets))
        pre = {k: np.zeros(shape) for k in ks}
        attacked = rows[0]["hr_post"] != ""
        post = {k: np.zeros(shape) for k in ks} if attacked else None
        has_d = rows[0]["ssim"] != ""
        ss, l2 = (np.zeros(shape), np.zeros(shape)) if has_d else (None, None)
        obj = np.zeros(len(seeds)) if rows[0]["objective"] != "" else None
        for r in rows:
            s, t, k = si[int(r["seed"])], ti[r["target"]], int(r["k"])
            pre[k][s, t] = float(r["hr_pre"])
            if attacked:
                post[k][s, t] = float(r["hr_post"])
            if has_d:
                ss[s, t], l2[s, t] = float(r["ssim"]), float(r["l2"])
            if obj is not None:
                obj[s] = float(r["objective"])
        return cls(rows[0]["label"], targets, seeds, ks, pre, post, ss, l2, obj, rows[0]["fingerprint"])

    @classmethod
    def from_csv(cls, path) -> "AttackReport":
        reports = read_reports_csv(path)
        if len(reports) != 1:
            raise ValueError(f"{path} holds {len(reports)} reports; use read_reports_csv")
        return reports[0]


def write_reports_csv(reports: list, path) -> None:
    """Several reports in one long-format CSV, told apart by label."""
    labels = [r.label for r in reports]
    if len(set(labels)) != len(labels):
        raise ValueError(f"report labels must be unique, got {labels}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(AttackReport.CSV_COLUMNS)
        for r in reports:
            w.writerows(r._rows())


def read_reports_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path} holds no report rows")
    groups = {}
    for r in rows:
        groups.setdefault(r["label"], []).append(r)
    return [AttackReport._from_rows(g) for g in groups.values()]


def load_report(path) -> AttackReport:
    path = str(path)
    if path.endswith(".csv"):
        return AttackReport.from_csv(path)
    with open(path) as fh:
        return AttackReport.from_dict(json.load(fh))


def merge_reports(reports: list, label: str | None = None) -> AttackReport:
    """Stack single- or multi-seed reports of the same variant along the seed axis."""
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    for r in reports[1:]:
        if r.targets != first.targets or r.ks != first.ks:
            raise ValueError("reports disagree on targets or ks")
    cat = lambda name: None if getattr(first, name) is None else np.concatenate([getattr(r, name) for r in reports])
    post = None if first.post is None else {k: np.concatenate([r.post[k] for r in reports]) for k in first.ks}
    return AttackReport(label or first.label, first.targets, sum((r.seeds for r in reports), ()), first.ks,
                        {k: np.concatenate([r.pre[k] for r in reports]) for k in first.ks}, post,
                        cat("ssim"), cat("l2"), cat("objective"), first.fingerprint, dict(first.meta))


def table_columns(ks=KS) -> list:
    return (["variant", "n_seeds"] + [f"hr@{k}_{w}_{s}" for k in ks for w in ("pre", "post") for s in ("mean", "std")]
            + ["ssim_mean", "objective_mean", "fingerprint"])


TABLE_COLUMNS = table_columns()


def write_table(reports: list, path) -> None:
    """Variant-per-row comparison table (ablations, sweeps)."""
    cols = table_columns(reports[0].ks if reports else KS)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in reports:
            s = r.summary()
            w.writerow([r.label, s["n_seeds"]] + [_num(s.get(c, float("nan"))) for c in cols[2:-1]]
                       + [r.fingerprint])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k in ("variant", "fingerprint") else int(v) if k == "n_seeds" else float(v))
                 for k, v in r.items()}
                for r in csv.DictReader(fh)]


def write_plot_data(rows, path, fingerprint: str = "") -> None:
    """(parameter value, k, mean HR, std HR) rows for external plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "k", "hr_mean", "hr_std", "fingerprint"])
        for row in rows:
            w.writerow([row["value"], row["k"], _num(row["hr_mean"]), _num(row["hr_std"]), fingerprint])


# ---------------------------------------------------------------------------
# evaluation

def image_distortion(original: np.ndarray, adversarial: np.ndarray):
    """Per-image SSIM and L2 distance."""
    x0 = to_nchw(check_images(original), torch.float64)
    x1 = to_nchw(check_images(adversarial), torch.float64)
    s = ssim(x0, x1, reduce=False).numpy()
    l2 = (x1 - x0).flatten(1).norm(dim=1).numpy()
    return s, l2


def evaluate_attack(models, images: ItemImages, targets, adversarial: ItemImages | None, ks=KS,
                    shortlist_size: int = 100, seed: int = 0, label: str = "attack", fingerprint: str = "",
                    tradeoff: float = 1.0) -> AttackReport:
    """HR@k of each target over all victim users, before and (optionally) after the image swap."""
    shortlister, victim = models
    targets = list(targets)
    ks = tuple(sorted(ks))
    users = np.arange(len(victim.users_))
    tidx = [victim.item_index(t) for t in targets]
    pre = hit_matrix(rank_users(models, users, max(ks), shortlist_size), tidx, ks)
    if adversarial is None:
        return AttackReport(label, targets, (seed,), ks, pre, fingerprint=fingerprint)
    missing = [t for t in targets if t not in adversarial]
    if missing:
        raise KeyError(f"no adversarial image for target {missing[0]!r}")
    adv_pixels = adversarial.stack(targets)
    feats = victim.features_with(targets, adv_pixels)
    post = hit_matrix(rank_users(models, users, max(ks), shortlist_size, features=feats), tidx, ks)
    s, l2 = image_distortion(images.stack(targets), adv_pixels)
    k_obj = 10 if 10 in ks else ks[0]
    obj = attack_objective(post[k_obj], 1.0 - s, tradeoff)
    return AttackReport(label, targets, (seed,), ks, pre, post, s, l2, [obj], fingerprint)


# ---------------------------------------------------------------------------
# pixel-space baseline

@dataclass
class PGDTrace:
    eps: float
    scores: list


def pixel_baseline(surrogate, images, eps: float, steps: int = 20, step_size: float | None = None,
                   max_backtracks: int = 6):
    """Projected sign-gradient ascent on ``surrogate`` inside an eps/255 max-norm ball.

    A step that lowers an image's surrogate score is retried with half the
    step size; if none of the retries helps the image stays put, so each
    per-image score (and the mean) is non-decreasing across steps.
    Returns (adversarial pixels NHWC, PGDTrace).
    """
    x0 = to_nchw(check_images(images), torch.float64)
    if eps < 0:
        raise ValueError(f"eps must be non-negative, got {eps}")
    radius = eps / 255.0
    alpha = torch.full((len(x0), 1, 1, 1), (step_size if step_size is not None else 2.5 * radius / max(steps, 1)),
                       dtype=torch.float64)

    def score(x):
        return surrogate(x).reshape(len(x))

    x = x0.clone()
    with torch.no_grad():
        current = score(x)
    trace = [float(current.mean())]
    if radius == 0:
        return to_nhwc(x).astype(np.float32), PGDTrace(eps, trace)
    for _ in range(steps):
        xg = x.clone().requires_grad_(True)
        grad, = torch.autograd.grad(score(xg).sum(), xg)
        direction = grad.sign()
        a = alpha.clone()
        pending = torch.ones(len(x), dtype=torch.bool)
        for _ in range(max_backtracks + 1):
            cand = torch.minimum(torch.maximum(x + a * direction, x0 - radius), x0 + radius).clamp(0, 1)
            with torch.no_grad():
                s = score(cand)
            better = pending & (s >= current)
            x = torch.where(better.view(-1, 1, 1, 1), cand, x)
            current = torch.where(better, s, current)
            pending &= ~better
            if not pending.any():
                break
            a = torch.where(pending.view(-1, 1, 1, 1), a / 2, a)
        trace.append(float(current.mean()))
    return to_nhwc(x.detach()).astype(np.float32), PGDTrace(eps, trace)


def calibrate_pixel_baseline(surrogate, images, target_distortion: float, steps: int = 20, tol: float = 0.01,
                             max_eps: float = 128.0, iters: int = 12):
    """Bisect the budget so mean 1 - SSIM of the baseline matches ``target_distortion``."""
    x0 = check_images(images)

    def run(eps):
        adv, trace = pixel_baseline(surrogate, x0, eps, steps)
        s, _ = image_distortion(x0, adv)
        return adv, trace, float((1 - s).mean())

    lo, hi = 0.0, max_eps
    best = run(hi)
    if best[2] <= target_distortion:
        return hi, best[0], best[1], best[2]
    best = None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        adv, trace, d = run(mid)
        if best is None or abs(d - target_distortion) < abs(best[3] - target_distortion):
            best = (mid, adv, trace, d)
        if abs(d - target_distortion) <= tol:
            break
        lo, hi = (mid, hi) if d < target_distortion else (lo, mid)
    return best


# ---------------------------------------------------------------------------
# variants

ABLATIONS = {
    "full": {},
    "w/o A": {"align_weight": 0.0},
    "w/o B": {"eta": 0.0},
}


def run_ablations(evaluate_variant, seeds) -> dict:
    """{variant: merged report}; ``evaluate_variant(overrides, seed)`` returns a single-seed report."""
    out = {}
    for name, overrides in ABLATIONS.items():
        out[name] = merge_reports([evaluate_variant(overrides, s) for s in seeds], label=name)
    return out


def cross_domain_eval(attack, models_b, images_b: ItemImages, targets_b, diffusion, ks=KS, shortlist_size=100,
                      seed=0, fingerprints=("", "")) -> AttackReport:
    """Apply an attack fitted on domain A to domain B's targets and victim."""
    adv = attack.transform(images_b.subset(list(targets_b)), models=diffusion)
    report = evaluate_attack(models_b, images_b, targets_b, adv, ks, shortlist_size, seed, label="cross-domain",
                             fingerprint=f"{fingerprints[0]}->{fingerprints[1]}")
    report.meta.update({"source_fingerprint": fingerprints[0], "target_fingerprint": fingerprints[1]})
    return report
