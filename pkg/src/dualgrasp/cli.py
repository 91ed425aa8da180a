"""Command-line entry point: ``dualgrasp {gen-data,train,sample,eval}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import diffusion as df
from . import evalharness as eh
from .gripper import default_gripper
from .model import CheckpointError, GraspScorer, ModelConfig, load_checkpoint, save_checkpoint
from .objects import InvalidDimension, load_ply

log = logging.getLogger("dualgrasp")

# default dimensions for bare primitive names on the command line
PRIMITIVE_DEFAULTS = {
    "box": {"type": "box", "w": 0.3, "d": 0.04, "h": 0.02},
    "cylinder": {"type": "cylinder", "r": 0.025, "h": 0.25, "segments": 24},
    "plate": {"type": "plate", "w": 0.35, "d": 0.25, "t": 0.025},
    "capped_l": {"type": "capped_l", "arm_x": 0.25, "arm_y": 0.2, "thickness": 0.04, "depth": 0.025},
}


class ConfigError(Exception):
    """Bad flags or config; maps to exit code 2."""


def parse_shapes(text: str) -> list[dict]:
    """Comma-separated toy ids (``plate``, ``rod``, ...), primitive names, or ``toy`` for all six."""
    toy = {s["id"]: s for s in eh.TOY_SHAPES}
    out = []
    for name in (s.strip() for s in text.split(",")):
        if name == "toy":
            out += list(eh.TOY_SHAPES)
        elif name in toy:
            out.append(toy[name])
        elif name in PRIMITIVE_DEFAULTS:
            out.append({"id": name, **PRIMITIVE_DEFAULTS[name]})
        else:
            raise ConfigError(f"unknown shape {name!r}")
    ids = [s["id"] for s in out]
    if not out or len(set(ids)) != len(ids):
        raise ConfigError(f"need at least one shape and unique names, got {text!r}")
    return out


def schedule_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--T", type=int, default=250, help="number of noise levels")
    p.add_argument("--sigma-min", type=float, default=0.005)
    p.add_argument("--sigma-max", type=float, default=0.5)
    p.add_argument("--t-c", type=int, default=50, help="collision guidance in the last t_c steps")
    p.add_argument("--eta-coeff", type=float, default=0.25, help="step size eta_t = eta_coeff * sigma_t")


def make_schedule(args) -> df.NoiseSchedule:
    try:
        return df.make_schedule(args.T, args.sigma_min, args.sigma_max, args.t_c, args.eta_coeff)
    except df.InvalidSchedule as exc:
        raise ConfigError(str(exc)) from None


def cmd_gen_data(args) -> int:
    shapes = parse_shapes(args.shapes)
    cfg = eh.DatasetConfig(pairs=args.pairs, perturbed_records=args.perturbed, candidate_factor=args.candidate_factor)
    manifest = eh.generate_dataset(shapes, args.seed, args.out, cfg)
    print(f"wrote {len(manifest['objects'])} objects to {args.out}; skipped: {manifest['skipped'] or 'none'}")
    return 0 if manifest["objects"] else 1


def read_history(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_train(args) -> int:
    if not (Path(args.data) / "manifest.json").exists():
        raise ConfigError(f"{args.data}: no manifest.json")
    _, objs = eh.load_dataset(args.data)
    tobjs = eh.train_objects(objs)
    schedule = make_schedule(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, csv_path = out / "model.dagd", out / "loss.csv"
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        if model.config.steps != schedule.T:
            raise ConfigError(f"checkpoint was trained with T={model.config.steps}, got --T {schedule.T}")
        previous = read_history(Path(args.resume).with_name("loss.csv"))
    else:
        model = GraspScorer(default_gripper().query_points, ModelConfig(seed=args.seed, steps=schedule.T))
        meta, previous = {}, []
    tcfg = df.TrainConfig(max_epochs_stage1=args.epochs_stage1, epochs_stage2=args.epochs_stage2, seed=args.seed,
                          fc_weight=args.fc_loss_weight, lr=args.lr)
    extra = {"seed": args.seed, "schedule": df.schedule_to_dict(schedule, args.eta_coeff),
             "train": asdict(tcfg), "dataset": str(Path(args.data).resolve()),
             "resumed_from": str(args.resume) if args.resume else None}
    offset = {s: 1 + max([int(float(r["epoch"])) for r in previous if r["stage"] == s], default=-1)
              for s in ("1", "2", "1b")}
    try:
        history = df.train(model, tobjs, schedule, tcfg)
        status = 0
    except df.Diverged as exc:
        log.error("training diverged: %s; keeping the last finite state", exc)
        if exc.last_state is not None:
            model.load_state_dict(exc.last_state)
        history, status = df.TrainHistory(), 1
    for r in history.rows:
        r["epoch"] += offset[str(r["stage"])]
    save_checkpoint(model, ckpt, {**meta, **extra})
    eh.write_history(csv_path, df.TrainHistory(previous + history.rows))
    print(f"wrote {ckpt} and {csv_path}")
    return status


def cmd_sample(args) -> int:
    if args.batch < 1:
        raise ConfigError("--batch must be >= 1")
    model, _ = load_checkpoint(args.ckpt)
    cloud = load_ply(args.cloud)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or len(cloud) < 4 or not np.isfinite(cloud).all():
        raise ValueError(f"{args.cloud}: need a finite (N, 3) cloud, got shape {cloud.shape}")
    schedule = make_schedule(args)
    if schedule.T != model.config.steps:
        raise CheckpointError(f"checkpoint was trained with T={model.config.steps}, sampler uses T={schedule.T}")
    guidance = df.GuidanceConfig(fc_weight=args.fc_weight, col_weight=args.col_weight)
    samples, dropped = df.sample(model, cloud, args.batch, schedule, guidance, args.seed)
    recs = [s.to_json() for s in samples]
    eh.write_json(Path(args.out), recs)
    run = {**df.schedule_to_dict(schedule, args.eta_coeff), "fc_weight": args.fc_weight,
           "col_weight": args.col_weight, "batch": args.batch, "seed": args.seed, "dropped": dropped}
    eh.write_json(Path(args.out).with_suffix(".run.json"), run)
    print(f"wrote {len(recs)} grasps to {args.out} ({dropped} dropped)")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.config).is_file():
        raise ConfigError(f"{args.config}: no such config file")
    try:
        report = eh.run_experiment(args.config)
    except (jsonschema.ValidationError, json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"{args.config}: {getattr(exc, 'message', exc)}") from None
    for variant, agg in report["aggregate"].items():
        print(f"{variant:24s} FCE {agg['fce']:6.2f}  GCR {agg['gcr']:6.2f}  GSR-proxy {agg['gsr_proxy']:6.2f}"
              f"  n={agg['count']}")
    print(f"config hash {report['config_hash']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualgrasp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="synthesize a labeled toy dataset")
    p.add_argument("--shapes", default="toy", help="comma-separated shape names or 'toy' (default)")
    p.add_argument("--pairs", type=int, default=400, help="labeled pairs per object")
    p.add_argument("--perturbed", type=int, default=400, help="relabeled perturbed pairs per object")
    p.add_argument("--candidate-factor", type=int, default=8, help="candidate pair budget per requested pair")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="staged training of the grasp scorer")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs-stage1", type=int, default=30, help="max stage-1 epochs (early stopping)")
    p.add_argument("--epochs-stage2", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--fc-loss-weight", type=float, default=1.0)
    p.add_argument("--resume", help="checkpoint to continue from; its loss.csv is extended")
    schedule_args(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="draw ranked grasp pairs for a point cloud")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True, help="PLY point cloud")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fc-weight", type=float, default=1.0)
    p.add_argument("--col-weight", type=float, default=1.0)
    p.add_argument("--out", default="grasps.json")
    schedule_args(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="run an ablation experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(eh.threads())
    try:
        return args.fn(args)
    except (ConfigError, InvalidDimension) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
