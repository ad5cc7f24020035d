"""Experiment plumbing: dataset generation, training, evaluation, inference,
memory inspection and the ablation sweep."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, restore_into, save_checkpoint
from .config import RunConfig, apply_variant
from .encoder import PointBatch
from .grouping import BlockPrediction, MergeGrid, assign_class, block_merge, mean_shift
from .losses import LabeledBatch
from .memory import write_weight_ply
from .metrics import instance_class_stats, merge_class_stats, semantic_metrics, summarize_instances, confusion
from .model import MPNet
from .numerics import UsageError, adam_step, no_grad
from .scenes import CHAIR, CLUTTER, TABLE, Scene, blockify, generate_scene, read_scene, write_scene

log = logging.getLogger(__name__)

NON_DOMINANT = (TABLE, CHAIR, CLUTTER)


class TrainingDiverged(RuntimeError):
    pass


def version_string() -> str:
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"mpnet {__version__}" + (f" ({desc})" if desc else "")


def prepare_run_dir(out: Path, cfg: RunConfig) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    (out / "VERSION").write_text(version_string() + "\n")
    return out


def kv_line(**items) -> str:
    parts = []
    for k, v in items.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        parts.append(f"{k}={v}")
    return " ".join(parts)


# --------------------------------------------------------------------------
# data


def scene_seed(data_seed: int, split: str, i: int) -> int:
    return data_seed * 1_000_003 + (0 if split == "train" else 500_000) + i


def gen_data(cfg: RunConfig, out: Path | None = None) -> Path:
    """Write train/test MPNC scenes and a manifest; each split holds at least one rare-pattern scene."""
    root = Path(out or cfg.data_dir)
    lines = []
    for split, count in (("train", cfg.num_train), ("test", cfg.num_test)):
        (root / split).mkdir(parents=True, exist_ok=True)
        scenes = [generate_scene(cfg.generator_config(scene_seed(cfg.data_seed, split, i))) for i in range(count)]
        if count and cfg.rare_pattern_rate > 0 and not any(s.rare for s in scenes):
            last_seed = scene_seed(cfg.data_seed, split, count - 1)
            scenes[-1] = generate_scene(cfg.generator_config(last_seed, force_rare=True))
        for i, scene in enumerate(scenes):
            name = f"{split}/scene_{i:03d}.mpnc"
            write_scene(scene, root / name)
            digest = hashlib.sha256((root / name).read_bytes()).hexdigest()
            lines.append(kv_line(split=split, file=name, seed=scene_seed(cfg.data_seed, split, i),
                                 rare="true" if scene.rare else "false", pattern=scene.metadata.get("pattern", "none"),
                                 points=scene.num_points, sha256=digest))
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    return root


def parse_kv(line: str) -> dict[str, str]:
    return dict(tok.split("=", 1) for tok in line.split())


def load_split(root: Path, split: str) -> list[Scene]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise UsageError(f"no dataset manifest at {manifest}; run gen-data first")
    scenes = []
    for line in manifest.read_text().splitlines():
        rec = parse_kv(line)
        if rec["split"] != split:
            continue
        scene = read_scene(root / rec["file"])
        scene.metadata.update(rare=rec["rare"] == "true", pattern=rec["pattern"], name=rec["file"])
        scenes.append(scene)
    return scenes


# --------------------------------------------------------------------------
# training


def make_batch(scenes: list[Scene], blocks, grid_cell: float) -> tuple[PointBatch, LabeledBatch]:
    feats, sids, sem, ins = [], [], [], []
    for k, (si, blk) in enumerate(blocks):
        feats.append(blk.features)
        sids.append(np.full(blk.count, k))
        sem.append(scenes[si].semantic[blk.indices])
        ins.append(scenes[si].instance[blk.indices])
    x = np.concatenate(feats)
    sid = np.concatenate(sids)
    return PointBatch(x, sid, grid_cell), LabeledBatch(np.concatenate(sem), np.concatenate(ins), x[:, :3], sid)


def epoch_blocks(cfg: RunConfig, scenes: list[Scene], epoch: int):
    spec = cfg.block_spec()
    blocks = []
    for si, scene in enumerate(scenes):
        seed = int(np.random.SeedSequence([cfg.seed, epoch, si]).generate_state(1)[0])
        blocks.extend((si, b) for b in blockify(scene, spec, seed=seed, room_xyz=cfg.room_xyz))
    order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(blocks))
    return [blocks[i] for i in order]


def train(cfg: RunConfig, out: Path, scenes: list[Scene] | None = None) -> dict:
    """Train one configuration; writes config, version, metrics.log and checkpoints into ``out``."""
    out = prepare_run_dir(out, cfg)
    scenes = scenes if scenes is not None else load_split(Path(cfg.data_dir), "train")
    if not scenes:
        raise UsageError("no training scenes")
    model = MPNet(cfg.model_config(), seed=cfg.seed)
    opt = cfg.optimizer_config()
    step, start_epoch = 0, 0
    log_path = out / "metrics.log"
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume, cfg.model_hash())
        restore_into(model.params, ckpt)
        step, start_epoch = ckpt.step, ckpt.epoch
        log.info("resumed from %s at step %d (epoch %d)", cfg.resume, step, start_epoch)
    else:
        log_path.write_text("")
    params = model.parameters()
    timing = open(out / "timing.log", "a")
    last_good = None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        blocks = epoch_blocks(cfg, scenes, epoch)
        sums: dict[str, float] = {}
        n_batches = 0
        for b0 in range(0, len(blocks), cfg.batch_size):
            batch, labels = make_batch(scenes, blocks[b0:b0 + cfg.batch_size], cfg.grid_cell)
            total, parts, _ = model.objective(batch, labels)
            value = total.item()
            terms = parts.values()
            if not math.isfinite(value) or not all(math.isfinite(v) for v in terms.values()):
                timing.close()
                raise TrainingDiverged(f"non-finite loss at step {step + 1}; last good checkpoint: {last_good}")
            total.backward()
            for p in params:
                if p.grad is not None:
                    adam_step(p, opt)
            step += 1
            n_batches += 1
            for k, v in {"L": value, **terms}.items():
                sums[k] = sums.get(k, 0.0) + v
        means = {k: v / n_batches for k, v in sums.items()}
        with open(log_path, "a") as fh:
            fh.write(kv_line(epoch=epoch + 1, step=step, **means) + "\n")
        timing.write(kv_line(epoch=epoch + 1, seconds=time.time() - t0) + "\n")
        timing.flush()
        name = out / f"ckpt_epoch{epoch + 1:03d}.mpck"
        save_checkpoint(name, model.params, step, epoch + 1, cfg.model_hash())
        save_checkpoint(out / "last.mpck", model.params, step, epoch + 1, cfg.model_hash())
        if cfg.keep_checkpoints == "last" and last_good is not None and last_good.name != "last.mpck":
            last_good.unlink(missing_ok=True)
        last_good = name
        log.info("epoch %d/%d step %d L=%.4f (%.1fs)", epoch + 1, cfg.epochs, step, means["L"], time.time() - t0)
    timing.close()
    return {"step": step, "checkpoint": str(out / "last.mpck")}


def load_model(cfg: RunConfig, checkpoint) -> MPNet:
    model = MPNet(cfg.model_config(), seed=cfg.seed)
    ckpt = load_checkpoint(checkpoint, cfg.model_hash())
    restore_into(model.params, ckpt)
    return model


# --------------------------------------------------------------------------
# inference


@dataclass
class ScenePrediction:
    semantic: np.ndarray
    instances: object
    probs: np.ndarray


def predict_scene(model: MPNet, cfg: RunConfig, scene: Scene) -> ScenePrediction:
    """Blocks → network → mean-shift per block → majority class → snake-order merge."""
    if scene.num_classes != model.cfg.num_classes:
        raise UsageError(f"scene has {scene.num_classes} classes, model expects {model.cfg.num_classes}")
    blocks = blockify(scene, cfg.block_spec(), full=True, room_xyz=cfg.room_xyz)
    prob_sum = np.zeros((scene.num_points, model.cfg.num_classes))
    hits = np.zeros(scene.num_points)
    preds = []
    ms_cfg = cfg.mean_shift_config()
    with no_grad():
        for blk in blocks:
            out = model.forward(PointBatch(blk.features, grid_cell=cfg.grid_cell))
            probs = out.probs.data
            prob_sum[blk.indices] += probs
            hits[blk.indices] += 1
            clusters = mean_shift(out.embeddings.data, ms_cfg)
            preds.append(BlockPrediction(blk.origin, blk.indices, assign_class(clusters, probs.argmax(axis=1)),
                                         blk.grid_pos))
    merged = block_merge(preds, scene.xyz, MergeGrid(cfg.voxel_size), cfg.merge_iou, cfg.stride)
    probs = prob_sum / np.maximum(hits, 1)[:, None]
    return ScenePrediction(probs.argmax(axis=1), merged, probs)


def evaluate(model: MPNet, cfg: RunConfig, scenes: list[Scene]) -> dict:
    """Dataset-level reports for all scenes, rare-pattern scenes and non-dominant classes."""
    c = model.cfg.num_classes
    cm_all = np.zeros((c, c), dtype=np.int64)
    cm_rare = np.zeros((c, c), dtype=np.int64)
    stats_all, stats_rare = [], []
    for scene in scenes:
        pred = predict_scene(model, cfg, scene)
        cm = confusion(pred.semantic, scene.semantic, c)
        st = instance_class_stats(pred.instances, scene.semantic, scene.instance, c)
        cm_all += cm
        stats_all.append(st)
        if scene.rare:
            cm_rare += cm
            stats_rare.append(st)

    def sem_from_cm(cm):
        pred = np.repeat(np.tile(np.arange(c), c), cm.reshape(-1))
        gt = np.repeat(np.repeat(np.arange(c), c), cm.reshape(-1))
        return semantic_metrics(pred, gt, c)

    def block(cm, stats, classes=None):
        rep = {}
        if cm.sum():
            rep.update(sem_from_cm(cm).as_dict())
        inst = summarize_instances(merge_class_stats(stats), classes)
        rep.update(inst.as_dict())
        rep["per_class"] = {int(k): v for k, v in inst.per_class.items()}
        return rep

    report = {"all": block(cm_all, stats_all)}
    nd = block(cm_all, stats_all, NON_DOMINANT)
    for key in ("oAcc", "mAcc", "mIoU"):
        nd.pop(key, None)
    sem_nd = sem_from_cm(cm_all)
    nd["mIoU"] = float(np.nanmean([sem_nd.per_class_iou[k] for k in NON_DOMINANT]))
    nd["mAcc"] = float(np.nanmean([sem_nd.per_class_acc[k] for k in NON_DOMINANT]))
    report["non_dominant"] = nd
    if stats_rare:
        report["rare"] = block(cm_rare, stats_rare)
    return report


def report_lines(report: dict) -> list[str]:
    lines = []
    for scope, rep in report.items():
        flat = {k: v for k, v in rep.items() if not isinstance(v, dict)}
        lines.append(kv_line(scope=scope, **flat))
    return lines


def run_eval(cfg: RunConfig, checkpoint, data_dir: Path, split: str = "test", out: Path | None = None) -> dict:
    model = load_model(cfg, checkpoint)
    report = evaluate(model, cfg, load_split(data_dir, split))
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{split}.json").write_text(json.dumps(report, indent=2, sort_keys=True))
        (out / f"report_{split}.txt").write_text("\n".join(report_lines(report)) + "\n")
    return report


# --------------------------------------------------------------------------
# memory inspection


def inspect_addressing(model: MPNet, cfg: RunConfig, scene: Scene, slot_index: int) -> np.ndarray:
    """Instance-reader addressing weight of one memory slot for every scene point
    (averaged over the overlapping blocks that contain the point)."""
    if model.memory is None or not model.cfg.use_ins_mem:
        raise UsageError("this model has no instance memory to inspect")
    n = model.memory.num_slots
    if not 0 <= slot_index < n:
        raise UsageError(f"slot {slot_index} out of range [0, {n})")
    return addressing_map(model, cfg, scene)[:, slot_index]


def addressing_map(model: MPNet, cfg: RunConfig, scene: Scene) -> np.ndarray:
    """P×N instance addressing weights, averaged over covering blocks."""
    total = np.zeros((scene.num_points, model.memory.num_slots))
    hits = np.zeros(scene.num_points)
    with no_grad():
        for blk in blockify(scene, cfg.block_spec(), full=True, room_xyz=cfg.room_xyz):
            out = model.forward(PointBatch(blk.features, grid_cell=cfg.grid_cell))
            total[blk.indices] += out.w_ins.data
            hits[blk.indices] += 1
    return total / np.maximum(hits, 1)[:, None]


def export_addressing(model: MPNet, cfg: RunConfig, scene: Scene, slot_index: int, path) -> np.ndarray:
    weights = inspect_addressing(model, cfg, scene, slot_index)
    write_weight_ply(path, scene.xyz, weights)
    return weights


# --------------------------------------------------------------------------
# ablation


def ablate(cfg: RunConfig, out: Path, configs=None, seeds=None) -> list[dict]:
    """Train and evaluate each (config, seed) pair; failures are recorded and the sweep continues."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    configs = configs or [c for c in cfg.ablate_configs.split(",") if c]
    seeds = seeds if seeds is not None else [int(s) for s in cfg.ablate_seeds.split(",") if s]
    data_dir = Path(cfg.data_dir)
    train_scenes = load_split(data_dir, "train")
    test_scenes = load_split(data_dir, "test")
    rows = []
    table = out / "ablation.txt"
    table.write_text("")
    for name in configs:
        for seed in seeds:
            run_dir = out / f"{name}_seed{seed}"
            row = {"config": name, "seed": seed}
            try:
                run_cfg = apply_variant(cfg, name).replace(seed=seed, resume="")
                t0 = time.time()
                train(run_cfg, run_dir, train_scenes)
                model = load_model(run_cfg, run_dir / "last.mpck")
                rep = evaluate(model, run_cfg, test_scenes)
                (run_dir / "report_test.json").write_text(json.dumps(rep, indent=2, sort_keys=True))
                row.update(status="ok", mPrec=rep["all"]["mPrec"], mRec=rep["all"]["mRec"], oAcc=rep["all"]["oAcc"],
                           nd_mPrec=rep["non_dominant"]["mPrec"], nd_mRec=rep["non_dominant"]["mRec"],
                           has_memory="true" if "memory.m" in model.params else "false",
                           seconds=round(time.time() - t0, 1))
            except Exception as exc:  # one failed member must not stop the sweep
                log.exception("ablation run %s seed %d failed", name, seed)
                row.update(status="failed", error=type(exc).__name__)
            rows.append(row)
            with open(table, "a") as fh:
                fh.write(kv_line(**row) + "\n")
    return rows


def memory_claim(rows, min_wins=4, prec_slack=0.01):
    """Check ablation rows for the two directional claims about the memory.

    Returns (wins, seeds, prec_drop, passed): ``wins`` counts seeds where the
    full model's non-dominant mRec beats both the baseline and the focal-loss
    baseline strictly; ``prec_drop`` is mean mPrec of the regularizer-free
    memory model minus that of the full model.
    """
    by = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        by.setdefault(r["config"], {})[int(r["seed"])] = r
    seeds = sorted(set(by.get("full", {})) & set(by.get("baseline", {})) & set(by.get("fl", {})))
    wins = sum(1 for s in seeds
               if float(by["full"][s]["nd_mRec"]) > max(float(by["baseline"][s]["nd_mRec"]),
                                                        float(by["fl"][s]["nd_mRec"])))
    full_prec = np.mean([float(r["mPrec"]) for r in by.get("full", {}).values()] or [np.nan])
    plain_prec = np.mean([float(r["mPrec"]) for r in by.get("segmem", {}).values()] or [np.nan])
    drop = float(plain_prec - full_prec)
    passed = wins >= min_wins and drop <= prec_slack
    return wins, len(seeds), drop, passed
