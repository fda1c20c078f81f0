"""Command line entry point: ``xmattack <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config

STAGE_COMMANDS = {"synth-data": "data", "train-victim": "victim", "attack": "attack", "evaluate": "evaluate"}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def _emit(**event) -> None:
    print(json.dumps(event, sort_keys=True))


def cmd_run(cfg: ExperimentConfig, until: str = "evaluate") -> int:
    res = pipeline.run(cfg, until)
    rows = [] if res["report"] is None else [res["report"].summary()]
    if res["baseline"] is not None:
        rows.append(res["baseline"].summary())
    _emit(command="run", until=until, out=str(cfg.out_dir), fingerprint=cfg.fingerprint(), summary=rows)
    return 0


def cmd_sweep(cfg: ExperimentConfig, parameter: str, values: list) -> int:
    rows = pipeline.sweep(cfg, parameter, values)
    _emit(command="sweep", parameter=parameter, rows=len(rows), out=str(cfg.out_dir / "sweep" / "sweep.csv"))
    return 0


def cmd_ablate(cfg: ExperimentConfig) -> int:
    reports = pipeline.ablate(cfg)
    _emit(command="ablate", out=str(cfg.out_dir / "ablation" / "table.csv"),
          variants={k: r.summary() for k, r in reports.items()})
    return 0


def cmd_verify(out_dir, cfg: ExperimentConfig | None) -> int:
    problems = pipeline.verify(out_dir, cfg)
    _emit(command="verify", out=str(out_dir), ok=not problems, problems=problems)
    return 0 if not problems else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="xmattack", description="Cross-modal image attacks on visual recommenders")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (defaults used when omitted)")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-q", "--quiet", action="store_true", help="suppress per-stage JSON logs on stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="full pipeline")
    sw = sub.add_parser("sweep", parents=[common], help="rerun over values of one config key")
    sw.add_argument("--param", required=True, help="dotted config key, e.g. adversary.ddim_steps")
    sw.add_argument("--values", required=True, help="comma separated values")
    sub.add_parser("ablate", parents=[common], help="full vs w/o alignment vs w/o injection")
    sub.add_parser("verify", parents=[common], help="re-hash a run directory against its manifest")
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the pipeline up to the {STAGE_COMMANDS[name]} stage")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not args.quiet:
        pipeline.configure_logging()
    try:
        if args.command == "verify":
            if args.out is None and args.config is None:
                raise ConfigError("verify needs --out or --config")
            cfg = _config(args) if args.config else None
            return cmd_verify(Path(args.out) if args.out else cfg.out_dir, cfg)
        cfg = _config(args)
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.param, [v.strip() for v in args.values.split(",") if v.strip()])
        if args.command == "ablate":
            return cmd_ablate(cfg)
        return cmd_run(cfg, STAGE_COMMANDS[args.command])
    except ConfigError as e:
        _emit(command=args.command, ok=False, error=str(e))
        return 2
    except pipeline.StageError as e:
        _emit(command=args.command, ok=False, stage=e.stage, error=str(e))
        return 1


if __name__ == "__main__":
    sys.exit(main())
