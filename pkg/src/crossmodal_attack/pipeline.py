"""Stage-by-stage experiment runner with a content-addressed cache.

Each stage writes into ``<cache>/<stage>/<key>/`` where the key hashes the
stage's code version, the config subset it reads and the digests of its
upstream stages.  A stage whose directory already holds a manifest is a cache
hit.  Artifacts written under the run's output directory embed the config
fingerprint; ``verify`` re-hashes them against ``run_manifest.json``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .attack import CrossModalAttack
from .config import ExperimentConfig, digest, from_dict
from .dataset import (Dataset, ItemImages, load_interactions, observe_users, read_split_manifest, save_interactions,
                      save_png, select_cold_items, split_leave_one_out, synth_dataset, write_split_manifest)
from .diffusion import fit_diffusion, load_diffusion, make_schedule, save_diffusion
from .encoders import FeatureEncoder
from .evaluation import (ABLATIONS, AttackReport, calibrate_pixel_baseline, evaluate_attack, load_report,
                         merge_reports, run_ablations, write_plot_data, write_reports_csv, write_table)
from .losses import write_loss_curve
from .threat import AccessAudit, guard_files, make_attacker_view
from .victim import train_victim

STAGES = ("data", "split", "backbone", "victim", "attack", "evaluate")
STAGE_VERSIONS = {"data": 1, "split": 1, "backbone": 1, "victim": 1, "attack": 2, "evaluate": 1}
# attack-estimator parameter -> config key, for the ablation variants
ABLATION_KEYS = {"align_weight": "loss.align", "eta": "adversary.eta"}

log = logging.getLogger("crossmodal_attack")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): sha256_file(p) for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _log_event(out_dir: Path | None, **event) -> None:
    line = json.dumps(event, sort_keys=True)
    log.info(line)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "log.jsonl", "a") as fh:
            fh.write(line + "\n")


@dataclass(frozen=True)
class StageResult:
    name: str
    key: str
    path: Path
    digest: str
    hit: bool

    def record(self) -> dict:
        return {"stage": self.name, "key": self.key, "digest": self.digest}


class Runner:
    """Runs stages for one config, sharing a cache directory."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.cache = config.cache_path
        self.out = config.out_dir
        self.fingerprint = config.fingerprint()
        self.stages: dict = {}

    # -- generic stage machinery -----------------------------------------
    def stage(self, name: str, subset: dict, upstream: list, build, label: str = "") -> StageResult:
        key = digest({"stage": name, "version": STAGE_VERSIONS[name], "config": subset,
                      "upstream": [u.digest for u in upstream]})
        final = self.cache / name / key
        t0 = time.time()
        if (final / "manifest.json").exists():
            with open(final / "manifest.json") as fh:
                res = StageResult(name, key, final, json.load(fh)["digest"], True)
        else:
            tmp = self.cache / name / f"{key}.partial"
            if tmp.exists():
                shutil.rmtree(tmp)
            tmp.mkdir(parents=True)
            try:
                build(tmp, key)
            except Exception as e:  # keep the partial directory for inspection
                _log_event(self.out, stage=name, key=key, label=label, status="failed", error=str(e))
                raise StageError(name, e) from e
            files = _hash_tree(tmp)
            stage_digest = digest({"key": key, "files": files})
            _write_json(tmp / "manifest.json", {"stage": name, "key": key, "version": STAGE_VERSIONS[name],
                                                "config": subset, "upstream": [u.record() for u in upstream],
                                                "files": files, "digest": stage_digest})
            if final.exists():
                shutil.rmtree(final)
            os.replace(tmp, final)
            res = StageResult(name, key, final, stage_digest, False)
        self.stages[(name, label)] = res
        _log_event(self.out, stage=name, key=key, label=label, status="ok", cache="hit" if res.hit else "miss",
                   seconds=round(time.time() - t0, 3))
        return res

    # -- stages -----------------------------------------------------------
    def data_stage(self) -> StageResult:
        c = self.config.data

        def build(d: Path, key):
            if c.source == "synthetic":
                ds = synth_dataset(c.n_users, c.n_items, c.density, c.strength, c.seed, image_size=c.image_size)
            else:
                ds = load_interactions(c.path, c.image_dir)
            save_interactions(ds, d / "interactions.tsv", d / "images")
            _stamp_pngs(d / "images", key)
            _write_json(d / "dataset.json", {"fingerprint": key, "n_users": ds.graph.n_users,
                                             "n_items": ds.graph.n_items, "n_edges": ds.graph.n_edges})

        return self.stage("data", self.config.to_dict()["data"], [], build)

    def split_stage(self, data: StageResult, seed: int) -> StageResult:
        def build(d: Path, key):
            ds = load_dataset(data)
            split = split_leave_one_out(ds.graph, self.config.data.test_fraction, seed)
            write_split_manifest(split, d / "test.tsv")
            _write_json(d / "split.json", {"fingerprint": key, "held_out_fraction": float(split.held_out_fraction)})

        return self.stage("split", {"test_fraction": self.config.data.test_fraction, "seed": seed}, [data], build,
                          f"seed={seed}")

    def backbone_stage(self, data: StageResult) -> StageResult:
        c = self.config.diffusion

        def build(d: Path, key):
            ds = load_dataset(data)
            torch.manual_seed(c.seed)
            schedule = make_schedule(c.T, c.beta_start, c.beta_end)
            models = fit_diffusion(ds.images.pixels, c.latent_shape, schedule, c.vae_epochs, c.unet_epochs, c.seed,
                                   vae_kwargs={"width": c.vae_width}, unet_kwargs={"width": c.unet_width})
            models.meta["fingerprint"] = key
            save_diffusion(models, d / "backbone.pt")

        return self.stage("backbone", self.config.to_dict()["diffusion"], [data], build)

    def victim_stage(self, data: StageResult, split: StageResult, seed: int) -> StageResult:
        c = self.config.victim

        def build(d: Path, key):
            ds = load_dataset(data)
            train = load_split(ds, split).train
            pixels = ds.images.stack(train.items)
            torch.manual_seed(seed)
            enc = FeatureEncoder(d_f=c.encoder_dim, epochs=c.encoder_epochs, seed=seed + 1).fit(pixels)
            common = dict(seed=seed, dim=c.dim, epochs=c.epochs, lr=c.lr, reg=c.reg)
            mf = train_victim("mf", train, **common)
            victim = train_victim(c.kind, train, pixels, enc, **common)
            torch.save({"format": "crossmodal-attack/victim-pair", "fingerprint": key,
                        "shortlister": mf, "victim": victim}, d / "victim.pt")

        return self.stage("victim", self.config.to_dict()["victim"], [data, split], build, f"seed={seed}")

    def attack_stage(self, data: StageResult, split: StageResult, backbone: StageResult, seed: int,
                     attacker: CrossModalAttack | None = None) -> StageResult:
        """Fit the attack on the audited attacker view.

        While the attacker code runs, opening the victim checkpoints, the
        held-out split or the full interaction file is a forbidden read.
        ``attacker`` replaces the configured estimator (used by audit tests).
        """
        cfg = self.config
        subset = {k: cfg.to_dict()[k] for k in ("preference", "adversary", "loss", "attack")}
        subset.update({"p": cfg.p, "cold_k": cfg.cold_k, "seed": seed})

        def build(d: Path, key):
            ds = load_dataset(data)
            train = load_split(ds, split).train
            cold = select_cold_items(train, cfg.cold_k)
            observed = observe_users(train, cfg.p, cold, seed)
            audit = AccessAudit(strict=True)
            view = make_attacker_view(Dataset(train, ds.images), observed, cold, audit)
            models = load_diffusion(backbone.path / "backbone.pt")
            del ds, train
            forbidden = [self.cache / "victim", self.cache / "evaluate", split.path, data.path / "interactions.tsv"]
            torch.manual_seed(seed)
            with guard_files(forbidden, audit):
                attack = (attacker or make_attack(cfg, seed)).fit(view, models)
                adv = attack.transform(view.images.subset(cold), models=models)
            (d / "adversarial").mkdir()
            for item in cold:
                save_png(d / "adversarial" / f"{item}.adv.png", adv[item].pixels, {"fingerprint": key})
            write_loss_curve(attack.loss_curve_, d / "loss_curve.csv")
            torch.save({"format": "crossmodal-attack/attack", "fingerprint": key, "attack": attack}, d / "attack.pt")
            _write_json(d / "audit.json", {"fingerprint": key, "reads": audit.n_reads,
                                           "forbidden": [vars(r) for r in audit.forbidden],
                                           "observed_users": int(len(observed.users)),
                                           "observed_edges": int(len(observed.edges)),
                                           "visible_images": len(view.visible_items), "targets": list(cold)})

        return self.stage("attack", subset, [data, split, backbone], build, f"seed={seed}")

    def evaluate_stage(self, data: StageResult, victim: StageResult, attack: StageResult, seed: int) -> StageResult:
        cfg = self.config
        subset = {"ks": cfg.ks, "shortlist_size": cfg.victim.shortlist_size, "tradeoff": cfg.loss.tradeoff,
                  "baseline": cfg.to_dict()["baseline"], "seed": seed}

        def build(d: Path, key):
            ds = load_dataset(data)
            pair = torch.load(victim.path / "victim.pt", weights_only=False)
            models = (pair["shortlister"], pair["victim"])
            with open(attack.path / "audit.json") as fh:
                targets = json.load(fh)["targets"]
            adv = load_adversarial(attack.path / "adversarial", targets)
            report = evaluate_attack(models, ds.images, targets, adv, cfg.ks, cfg.victim.shortlist_size, seed,
                                     "attack", key, cfg.loss.tradeoff)
            report.to_json(d / "report.json")
            if cfg.baseline.enabled:
                atk = torch.load(attack.path / "attack.pt", weights_only=False)["attack"]
                target_d = float(report.distortion()[0])
                eps, pixels, trace, got = calibrate_pixel_baseline(atk.surrogate_score, ds.images.stack(targets),
                                                                   target_d, steps=cfg.baseline.steps)
                base = evaluate_attack(models, ds.images, targets, ItemImages(targets, pixels, "adversarial"),
                                       cfg.ks, cfg.victim.shortlist_size, seed, "pixel", key, cfg.loss.tradeoff)
                base.meta.update({"eps": float(eps), "matched_distortion": target_d, "achieved_distortion": got,
                                  "trace": [float(v) for v in trace.scores]})
                base.to_json(d / "baseline.json")

        return self.stage("evaluate", subset, [victim, attack], build, f"seed={seed}")

    # -- seed-level driver ----------------------------------------------------
    def run_seed(self, seed: int, until: str = "evaluate") -> dict:
        stop = STAGES.index(until)
        res = {"data": self.data_stage()}
        if stop >= STAGES.index("split"):
            res["split"] = self.split_stage(res["data"], seed)
        if stop >= STAGES.index("backbone") and until != "victim":
            res["backbone"] = self.backbone_stage(res["data"])
        if stop >= STAGES.index("victim") and until != "backbone":
            if until in ("victim", "evaluate"):
                res["victim"] = self.victim_stage(res["data"], res["split"], seed)
            if until in ("attack", "evaluate"):
                res["attack"] = self.attack_stage(res["data"], res["split"], res["backbone"], seed)
        if until == "evaluate":
            res["evaluate"] = self.evaluate_stage(res["data"], res["victim"], res["attack"], seed)
        return res


# ---------------------------------------------------------------------------
# artifact loaders

def _stamp_pngs(image_dir: Path, fingerprint: str) -> None:
    for p in sorted(image_dir.glob("*.png")):
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        save_png(p, arr, {"fingerprint": fingerprint})


def load_dataset(data: StageResult) -> Dataset:
    return load_interactions(data.path / "interactions.tsv", data.path / "images")


def load_split(ds: Dataset, split: StageResult):
    return read_split_manifest(ds.graph, split.path / "test.tsv")


def load_adversarial(image_dir: Path, targets) -> ItemImages:
    pixels = []
    for t in targets:
        with Image.open(Path(image_dir) / f"{t}.adv.png") as im:
            pixels.append(np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
    return ItemImages(list(targets), np.stack(pixels), provenance="adversarial")


def make_attack(cfg: ExperimentConfig, seed: int) -> CrossModalAttack:
    a, adv, w, pref = cfg.attack, cfg.adversary, cfg.loss, cfg.preference
    return CrossModalAttack(eta=adv.eta, ddim_steps=adv.ddim_steps, inject_step=adv.inject_step,
                            adaptive_eta=adv.adaptive_eta, clip_weight=w.clip, ssim_weight=w.ssim,
                            align_weight=w.align, pref_dim=pref.dim, pref_layers=pref.layers,
                            affinity_k=pref.affinity_k, pref_epochs=pref.epochs, encoder_dim=a.encoder_dim,
                            encoder_epochs=a.encoder_epochs, heads=a.heads, steps=a.steps, lr=a.lr,
                            aggregation=a.aggregation, align_head=a.align_head, ridge_alpha=a.ridge_alpha, seed=seed)


# ---------------------------------------------------------------------------
# embedded fingerprints

def embedded_fingerprint(path) -> str | None:
    """Fingerprint stored inside an artifact, or None for formats that carry none."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path) as fh:
            obj = json.load(fh)
        return obj.get("fingerprint") if isinstance(obj, dict) else None
    if path.suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        values = {r.get("fingerprint") for r in rows}
        return values.pop() if len(values) == 1 else None
    if path.suffix == ".png":
        with Image.open(path) as im:
            return im.text.get("fingerprint")
    if path.suffix == ".pt":
        blob = torch.load(path, weights_only=False)
        if not isinstance(blob, dict):
            return None
        return blob.get("fingerprint") or blob.get("meta", {}).get("fingerprint")
    return None


# ---------------------------------------------------------------------------
# run / sweep / ablate

def _export_seed(runner: Runner, seed: int, res: dict, outputs: dict) -> tuple:
    fp = runner.fingerprint
    dest = runner.out / "seeds" / f"seed_{seed}"
    (dest / "adversarial").mkdir(parents=True, exist_ok=True)
    report = load_report(res["evaluate"].path / "report.json")
    report.fingerprint = fp
    report.meta.update({"seed_stages": {k: v.key for k, v in sorted(res.items())}})
    report.to_json(dest / "report.json")
    report.to_csv(dest / "report.csv")
    for p in (dest / "report.json", dest / "report.csv"):
        outputs[str(p.relative_to(runner.out))] = fp
    for t in report.targets:
        with Image.open(res["attack"].path / "adversarial" / f"{t}.adv.png") as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        p = dest / "adversarial" / f"{t}.adv.png"
        save_png(p, arr, {"fingerprint": fp})
        outputs[str(p.relative_to(runner.out))] = fp
    baseline = None
    if (res["evaluate"].path / "baseline.json").exists():
        baseline = load_report(res["evaluate"].path / "baseline.json")
        baseline.fingerprint = fp
        baseline.to_json(dest / "baseline.json")
        outputs[str((dest / "baseline.json").relative_to(runner.out))] = fp
    return report, baseline


def _finish(runner: Runner, outputs: dict, extra: dict | None = None) -> None:
    cfg = runner.config
    runner.out.mkdir(parents=True, exist_ok=True)
    cfg.save(runner.out / "config.yaml")
    manifest = {
        "fingerprint": runner.fingerprint,
        "cache_dir": str(cfg.cache_path.resolve()),
        "stages": [dict(v.record(), label=label) for (name, label), v in sorted(runner.stages.items())],
        "outputs": {rel: {"fingerprint": fp, "sha256": sha256_file(runner.out / rel)}
                    for rel, fp in sorted(outputs.items())},
    }
    manifest.update(extra or {})
    _write_json(runner.out / "run_manifest.json", manifest)


def run(cfg: ExperimentConfig, until: str = "evaluate") -> dict:
    """Full pipeline over all seeds; returns {"report", "baseline", "runner"}."""
    if until not in STAGES:
        raise ValueError(f"until must be one of {STAGES}")
    runner = Runner(cfg)
    outputs = {}
    reports, baselines = [], []
    for seed in cfg.seeds:
        res = runner.run_seed(seed, until)
        if until == "evaluate":
            r, b = _export_seed(runner, seed, res, outputs)
            reports.append(r)
            if b is not None:
                baselines.append(b)
    report = baseline = None
    if reports:
        report = merge_reports(reports, label="attack")
        report.meta = {}
        runner.out.mkdir(parents=True, exist_ok=True)
        report.to_json(runner.out / "report.json")
        both = [report]
        if baselines:
            baseline = merge_reports(baselines, label="pixel")
            baseline.meta = {}
            both.append(baseline)
        write_reports_csv(both, runner.out / "report.csv")
        _write_json(runner.out / "summary.json", {"fingerprint": runner.fingerprint,
                                                  "rows": [r.summary() for r in both]})
        for rel in ("report.json", "report.csv", "summary.json"):
            outputs[rel] = runner.fingerprint
    _finish(runner, outputs, {"until": until})
    return {"report": report, "baseline": baseline, "runner": runner}


def sweep(cfg: ExperimentConfig, parameter: str, values: list) -> list:
    """cmd_run per value with a shared cache; one row per (value, seed)."""
    cfg.override(parameter, values[0])  # validates the key before any work
    root = cfg.out_dir / "sweep"
    rows, plot, outputs = [], [], {}
    fp = cfg.fingerprint()
    for v in values:
        sub = cfg.override(parameter, v)
        sub.out = str(root / f"{parameter}={v}")
        sub.cache_dir = str(cfg.cache_path)
        rep = run(sub)["report"]
        for s, seed in enumerate(rep.seeds):
            row = {"parameter": parameter, "value": v, "seed": seed}
            for k in rep.ks:
                row[f"hr@{k}_pre"] = float(rep.pre[k][s].mean())
                row[f"hr@{k}_post"] = float(rep.post[k][s].mean())
            row["ssim"] = float(rep.ssim[s].mean())
            rows.append(row)
        for k in rep.ks:
            m = rep.mean_hr(k)
            plot.append({"value": v, "k": k, "hr_mean": float(m.mean()), "hr_std": float(m.std())})
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep.csv", "w", newline="") as fh:
        cols = list(rows[0]) + ["fingerprint"]
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        for r in rows:
            w.writerow({**{k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()}, "fingerprint": fp})
    write_plot_data(plot, root / "plot_data.csv", fp)
    outputs["sweep.csv"] = fp
    outputs["plot_data.csv"] = fp
    _finish(_sub_runner(cfg, root), outputs, {"sweep": {"parameter": parameter, "values": list(values)}})
    return rows


def ablate(cfg: ExperimentConfig) -> dict:
    """Full attack, w/o alignment, w/o injection, under identical seeds and victims."""
    root = cfg.out_dir / "ablation"
    fp = cfg.fingerprint()

    def evaluate_variant(overrides, seed):
        sub = cfg
        for param, value in overrides.items():
            sub = sub.override(ABLATION_KEYS[param], value)
        sub = from_dict(sub.to_dict())
        sub.seeds = [seed]
        sub.out = str(root / _slug(overrides) / f"seed_{seed}")
        sub.cache_dir = str(cfg.cache_path)
        rep = run(sub)["report"]
        rep.fingerprint = fp
        return rep

    reports = run_ablations(evaluate_variant, cfg.seeds)
    root.mkdir(parents=True, exist_ok=True)
    write_table(list(reports.values()), root / "table.csv")
    write_reports_csv(list(reports.values()), root / "reports.csv")
    _finish(_sub_runner(cfg, root), {"table.csv": fp, "reports.csv": fp},
            {"ablation": sorted(reports)})
    return reports


def _sub_runner(cfg: ExperimentConfig, out: Path) -> Runner:
    """Runner whose manifest lives in ``out`` but whose cache is the parent run's."""
    sub = from_dict(cfg.to_dict())
    sub.out, sub.cache_dir = str(out), str(cfg.cache_path)
    return Runner(sub)


def _slug(overrides: dict) -> str:
    if not overrides:
        return "full"
    return "_".join(f"{k}={v}" for k, v in sorted(overrides.items()))


# ---------------------------------------------------------------------------
# verification

def verify(out_dir, config: ExperimentConfig | None = None) -> list:
    """Re-hash a run directory; returns a list of human-readable problems (empty when clean)."""
    out_dir = Path(out_dir)
    problems = []
    mpath = out_dir / "run_manifest.json"
    if not mpath.exists():
        return [f"{mpath} missing"]
    with open(mpath) as fh:
        manifest = json.load(fh)
    if config is None and (out_dir / "config.yaml").exists():
        from .config import load_config
        config = load_config(out_dir / "config.yaml")
    if config is not None and config.fingerprint() != manifest["fingerprint"]:
        problems.append(f"config fingerprint {config.fingerprint()} != manifest {manifest['fingerprint']}")
    for rel, rec in manifest["outputs"].items():
        p = out_dir / rel
        if not p.exists():
            problems.append(f"{rel}: missing")
            continue
        if sha256_file(p) != rec["sha256"]:
            problems.append(f"{rel}: content hash mismatch")
        got = embedded_fingerprint(p)
        if got != rec["fingerprint"]:
            problems.append(f"{rel}: embedded fingerprint {got} != {rec['fingerprint']}")
    cache = Path(manifest["cache_dir"])
    for st in manifest["stages"]:
        d = cache / st["stage"] / st["key"]
        if not (d / "manifest.json").exists():
            problems.append(f"stage {st['stage']} {st['key']}: cache entry missing")
            continue
        with open(d / "manifest.json") as fh:
            sm = json.load(fh)
        files = _hash_tree(d)
        if files != sm["files"]:
            problems.append(f"stage {st['stage']} {st['key']}: artifact hashes changed")
        if digest({"key": st["key"], "files": files}) != st["digest"]:
            problems.append(f"stage {st['stage']} {st['key']}: digest mismatch")
        for rel in files:
            fp = embedded_fingerprint(d / rel) if rel.endswith((".json", ".pt", ".png")) else None
            if fp is not None and fp != st["key"]:
                problems.append(f"stage {st['stage']} {rel}: embedded key {fp} != {st['key']}")
    return problems


def configure_logging(level=logging.INFO) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(level)
    log.propagate = False
