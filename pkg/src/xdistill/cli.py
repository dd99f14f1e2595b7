"""Command-line entry point: ``xdistill <command> [flags]``.

Exit codes: 0 success, 1 training aborted on a non-finite value, 2 usage or
input error. Outputs default to ``$CD_RUN_DIR`` (or ``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .dataset import DatasetError, file_hash, read_dataset, write_dataset
from .metrics import rankme
from .pipeline import (PRESETS, EvalPlan, FinetuneConfig, ProbeConfig, TrainConfig, TrainingAborted,
                       ablation_grid, backbone_features, finetune, linear_probe, pretrain, random_backbone,
                       resolve_backbone, split_frames, voxelize_frames, write_grid_csv)
from .synthworld import DatasetConfig, generate_dataset

EXIT_OK, EXIT_ABORT, EXIT_USAGE = 0, 1, 2
_NESTED = ("augment", "query")


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get("CD_RUN_DIR") or "runs")


# ------------------------------------------------------------------ flag generation

def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser: argparse.ArgumentParser, cls, prefix: str = "", skip=()) -> None:
    """One optional flag per scalar field; unset flags stay None so config files are not overridden."""
    for f in fields(cls):
        if f.name in skip:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        dest = f"{prefix}{f.name}"
        if is_dataclass(default):
            _add_dataclass_flags(parser, type(default), prefix=f"{dest}.")
            continue
        flag = _flag(dest.replace(".", "-"))
        if isinstance(default, bool):
            parser.add_argument(flag, dest=dest, action=argparse.BooleanOptionalAction, default=None)
        elif isinstance(default, tuple):
            kind = type(default[0]) if default else float
            parser.add_argument(flag, dest=dest, type=kind, nargs="+", default=None)
        elif isinstance(default, (int, float, str)):
            parser.add_argument(flag, dest=dest, type=type(default), default=None)
        elif default is None:
            parser.add_argument(flag, dest=dest, type=str, default=None)


def _overrides(args: argparse.Namespace, cls, prefix: str = "") -> dict:
    out: dict = {}
    for f in fields(cls):
        dest = f"{prefix}{f.name}"
        if f.name in _NESTED and not prefix:
            sub = {k.split(".", 1)[1]: v for k, v in vars(args).items()
                   if k.startswith(dest + ".") and v is not None}
            if sub:
                out[f.name] = sub
            continue
        v = getattr(args, dest, None)
        if v is not None:
            out[f.name] = tuple(v) if isinstance(v, list) else v
    return out


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc


def resolve_train_config(args: argparse.Namespace) -> TrainConfig:
    """defaults < preset < config file < flags."""
    base = TrainConfig().to_dict()
    base.update(PRESETS[args.preset])
    file_cfg = _read_json(args.config)
    flags = _overrides(args, TrainConfig)
    for layer in (file_cfg, flags):
        for key, value in layer.items():
            if key in _NESTED and isinstance(value, dict):
                merged = dict(base[key] if isinstance(base[key], dict) else dataclasses.asdict(base[key]))
                merged.update(value)
                base[key] = merged
            else:
                base[key] = value
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    return cfg


def _probe_config(args) -> ProbeConfig:
    cfg = ProbeConfig(**{k: v for k, v in _overrides(args, ProbeConfig, "probe_").items()})
    return cfg


def _load_data(path):
    if path is None:
        return list(generate_dataset(DatasetConfig()))
    p = Path(path)
    if not p.exists():
        raise UsageError(f"dataset not found: {p}")
    return str(p)


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    cfg_dict = DatasetConfig().to_dict()
    cfg_dict.update(_read_json(args.config))
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.frames is not None:
        cfg_dict["num_frames"] = args.frames
    if cfg_dict["num_frames"] < 1:
        raise UsageError("--frames must be >= 1")
    try:
        cfg = DatasetConfig.from_dict(cfg_dict)
    except TypeError as exc:
        raise UsageError(f"invalid dataset config: {exc}") from exc
    out = Path(args.out) if args.out else output_root() / "dataset.cdsf"
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        write_dataset(generate_dataset(cfg), out, {**cfg.to_dict(), "tool_version": __version__})
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot write dataset: {exc}") from exc
    print(json.dumps({"path": str(out), "dataset_hash": file_hash(out), "frames": cfg.num_frames}))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_train_config(args)
    data = _load_data(args.data)
    if isinstance(data, str):
        cfg = replace(cfg, dataset=data)
    run_dir = Path(args.run_dir) if args.run_dir else output_root() / f"pretrain-{cfg.hash()}"
    rec = pretrain(cfg, data, run_dir=run_dir, resume_from=args.resume)
    print(json.dumps({"run_dir": str(run_dir), "checkpoint": rec.checkpoint, "config_hash": rec.config_hash,
                      "dataset_hash": rec.dataset_hash, "final_distill": rec.final_distill,
                      "rankme": rec.rank_reports[-1]["rankme"], "tool_version": __version__}))
    return EXIT_OK


def _backbone(args, cfg: TrainConfig | None = None):
    if args.checkpoint is None:
        cfg = cfg or TrainConfig()
        return random_backbone(cfg), cfg
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    return resolve_backbone(args.checkpoint)


def _emit(result: dict, args, name: str) -> None:
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.run_dir:
        d = Path(args.run_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text)
    print(text)


def cmd_probe(args) -> int:
    backbone = _backbone(args)
    data = _load_data(args.data)
    rep = linear_probe(backbone, data, _probe_config(args), backbone[1])
    _emit({"checkpoint": args.checkpoint, "tool_version": __version__, "config_hash": backbone[1].hash(),
           **rep.to_dict()}, args, "probe.json")
    return EXIT_OK


def cmd_finetune(args) -> int:
    backbone = _backbone(args)
    data = _load_data(args.data)
    ft = FinetuneConfig(**{k: v for k, v in _overrides(args, FinetuneConfig, "ft_").items() if k != "augment"})
    rep = finetune(backbone, data, args.fraction, ft, backbone[1])
    _emit({"checkpoint": args.checkpoint, "fraction": args.fraction, "tool_version": __version__,
           "config_hash": backbone[1].hash(), **rep.to_dict()}, args, "finetune.json")
    return EXIT_OK


def cmd_rankme(args) -> int:
    encoder, cfg = _backbone(args)
    data = _load_data(args.data)
    frames = read_dataset(data) if isinstance(data, str) else data
    frames = voxelize_frames(split_frames(frames, args.split) or frames, cfg.augment.grid_size)
    feats = np.concatenate(backbone_features(encoder, frames))
    if args.samples and len(feats) > args.samples:
        idx = np.sort(np.random.default_rng([args.seed, 31]).choice(len(feats), args.samples, replace=False))
        feats = feats[idx]
    print(json.dumps(rankme(feats).to_dict()))
    return EXIT_OK


def _grid_worker(payload):
    cfg_dict, data, table, seed, plan, cache = payload
    return ablation_grid(TrainConfig.from_dict(cfg_dict), data, table, [seed], plan, cache)


def cmd_grid(args) -> int:
    cfg = resolve_train_config(args)
    data = _load_data(args.data)
    run_dir = Path(args.run_dir) if args.run_dir else output_root() / f"grid-{args.table}-{cfg.hash()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    plan = EvalPlan(_probe_config(args), FinetuneConfig() if args.finetune else None, args.fraction)
    seeds = args.seeds or [0]
    cache = run_dir / "cells"
    if args.parallel > 1:
        jobs = [(cfg.to_dict(), data, args.table, s, plan, cache) for s in seeds]
        with ProcessPoolExecutor(args.parallel) as pool:
            rows = [r for part in pool.map(_grid_worker, jobs) for r in part]
    else:
        rows = ablation_grid(cfg, data, args.table, seeds, plan, cache)
    write_grid_csv(rows, run_dir / "grid.csv")
    print(json.dumps({"grid": str(run_dir / "grid.csv"), "rows": len(rows), "tool_version": __version__}))
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_ABORT


def cmd_report(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise UsageError(f"run directory not found: {run}")
    summary: dict = {}
    if (run / "report.json").exists():
        summary.update(json.loads((run / "report.json").read_text()))
    if (run / "config.json").exists():
        summary["config"] = json.loads((run / "config.json").read_text())
    if (run / "grid.csv").exists():
        with open(run / "grid.csv", newline="") as fh:
            summary["grid"] = list(csv.DictReader(fh))
    if not summary:
        raise UsageError(f"{run} holds no report.json, config.json or grid.csv")
    if args.format == "json":
        print(json.dumps(summary, indent=2, sort_keys=True))
        return EXIT_OK
    buf = io.StringIO()
    if "grid" in summary:
        rows = summary["grid"]
        w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()) if rows else ["status"], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    else:
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "distill", "occ_bce", "occ_intensity", "temporal", "total"])
        for e in summary.get("epochs", []):
            w.writerow([e["epoch"], *(repr(e[k]) for k in ("distill", "occ_bce", "occ_intensity", "temporal", "total"))])
        last = (summary.get("rank_reports") or [{}])[-1]
        w.writerow([])
        w.writerow(["config_hash", "dataset_hash", "steps", "rankme", "numerical_rank"])
        w.writerow([summary.get("config_hash"), summary.get("dataset_hash"), summary.get("steps"),
                    last.get("rankme"), last.get("numerical_rank")])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xdistill", description="Desk-scale 2D-to-3D feature distillation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--seed", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--out")
    g.add_argument("--config", help="JSON dataset config")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--config", help="JSON train config (overridden by flags)")
        sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        _add_dataclass_flags(sp, TrainConfig, skip=("dataset",))

    def probe_flags(sp):
        for f in fields(ProbeConfig):
            sp.add_argument(_flag(f"probe_{f.name}"), dest=f"probe_{f.name}", type=type(f.default), default=None)

    t = sub.add_parser("pretrain", help="distil the teacher into a point backbone")
    t.add_argument("--data")
    t.add_argument("--run-dir")
    t.add_argument("--resume", help="checkpoint to resume from")
    train_flags(t)
    t.set_defaults(func=cmd_pretrain)

    for name, func in (("probe", cmd_probe), ("finetune", cmd_finetune)):
        e = sub.add_parser(name, help=f"{name} a backbone (random init without --checkpoint)")
        e.add_argument("--checkpoint")
        e.add_argument("--data")
        e.add_argument("--run-dir")
        if name == "probe":
            probe_flags(e)
        else:
            e.add_argument("--fraction", type=float, default=0.1)
            for f in fields(FinetuneConfig):
                if f.name != "augment":
                    e.add_argument(_flag(f"ft_{f.name}"), dest=f"ft_{f.name}", type=type(f.default), default=None)
        e.set_defaults(func=func)

    r = sub.add_parser("rankme", help="RankMe report of backbone features as JSON")
    r.add_argument("--checkpoint")
    r.add_argument("--data")
    r.add_argument("--split", default="val")
    r.add_argument("--samples", type=int, default=4096)
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_rankme)

    gr = sub.add_parser("grid", help="run an ablation table")
    gr.add_argument("--table", default="5", choices=["2", "3", "5", "A2", "A5"])
    gr.add_argument("--data")
    gr.add_argument("--run-dir")
    gr.add_argument("--seeds", type=int, nargs="+")
    gr.add_argument("--finetune", action="store_true", help="also fine-tune each cell")
    gr.add_argument("--fraction", type=float, default=0.1)
    gr.add_argument("--parallel", type=int, default=1)
    train_flags(gr)
    probe_flags(gr)
    gr.set_defaults(func=cmd_grid)

    rp = sub.add_parser("report", help="summarise a run directory (read-only)")
    rp.add_argument("--run", required=True)
    rp.add_argument("--format", choices=["csv", "json"], default="csv")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, ValueError, TypeError, DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
