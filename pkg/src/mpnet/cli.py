"""``mpnet`` command line: gen-data, train, eval, infer, inspect-memory, ablate."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import ConfigError, RunConfig, apply_variant, load_config, parse_config
from .numerics import UsageError
from .scenes import FormatError, Scene, read_scene, write_ply

log = logging.getLogger("mpnet")


def _resolve_config(args, fallback_dir: Path | None = None) -> RunConfig:
    path = args.config
    if path is None and fallback_dir is not None and (fallback_dir / "config.txt").exists():
        path = fallback_dir / "config.txt"
    cfg = load_config(path)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    if getattr(args, "variant", None):
        cfg = apply_variant(cfg, args.variant)
    if getattr(args, "data", None):
        cfg = cfg.replace(data_dir=str(args.data))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(data_seed=args.seed)
    out = P.gen_data(cfg, Path(args.out) if args.out else None)
    print(f"wrote {cfg.num_train} train + {cfg.num_test} test scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.resume:
        cfg = cfg.replace(resume=str(args.resume))
    out = Path(args.out or "runs/train")
    result = P.train(cfg, out)
    print(f"trained {result['step']} steps; checkpoint {result['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _resolve_config(args, ckpt.parent)
    report = P.run_eval(cfg, ckpt, Path(cfg.data_dir), args.split, Path(args.out) if args.out else None)
    for line in P.report_lines(report):
        print(line)
    return 0


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _resolve_config(args, ckpt.parent)
    scene = read_scene(args.scene)
    model = P.load_model(cfg, ckpt)
    pred = P.predict_scene(model, cfg, scene)
    out = Path(args.out or "prediction.ply")
    labeled = Scene(scene.points, pred.semantic, pred.instances.point_instance_ids, scene.num_classes)
    write_ply(labeled, out)
    print(P.kv_line(points=scene.num_points, instances=len(pred.instances.instance_classes), ply=str(out)))
    return 0


def cmd_inspect_memory(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg = _resolve_config(args, ckpt.parent)
    scene = read_scene(args.scene)
    model = P.load_model(cfg, ckpt)
    out = Path(args.out or f"slot_{args.slot}.ply")
    weights = P.export_addressing(model, cfg, scene, args.slot, out)
    print(P.kv_line(slot=args.slot, points=len(weights), max_weight=float(np.max(weights)), ply=str(out)))
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    configs = args.configs.split(",") if args.configs else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    if args.seed is not None:
        seeds = [args.seed]
    rows = P.ablate(cfg, Path(args.out or "runs/ablation"), configs, seeds)
    for row in rows:
        print(P.kv_line(**row))
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output path")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mpnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic train/test scenes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    p.add_argument("--variant", help="ablation row to train (baseline, fl, insmem, segmem, full)")
    p.add_argument("--data", type=Path, help="dataset directory")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="label one MPNC scene and write a PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("inspect-memory", parents=[common], help="export one slot's addressing weights as PLY")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--slot", type=int, required=True)
    p.set_defaults(func=cmd_inspect_memory)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate every (config, seed) pair")
    p.add_argument("--configs", help="comma-separated ablation rows")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"mpnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except P.TrainingDiverged as exc:
        print(f"mpnet {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
