"""Inference-time instance assembly: flat-kernel mean-shift over embeddings,
majority-vote class assignment, and snake-order merging of overlapping
blocks into scene-level instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .numerics import UsageError


@dataclass
class MeanShiftConfig:
    bandwidth: float = 0.6
    max_iters: int = 100
    convergence_eps: float = 1e-4
    merge_radius: float | None = None
    max_seeds: int = 4096

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.merge_radius is None:
            self.merge_radius = self.bandwidth / 2
        if not 0 < self.merge_radius <= self.bandwidth:
            raise ValueError("merge_radius must lie in (0, bandwidth]")


@dataclass
class InstancePrediction:
    point_instance_ids: np.ndarray
    instance_classes: np.ndarray
    instance_sizes: np.ndarray
    confidences: np.ndarray | None = None

    @property
    def num_instances(self) -> int:
        return len(self.instance_classes)


def _dense_by_first_seen(labels: np.ndarray) -> np.ndarray:
    """Relabel so ids run 0..k-1 in order of first appearance; negatives stay -1."""
    out = np.full(len(labels), -1, dtype=np.int64)
    valid = labels >= 0
    if not valid.any():
        return out
    uniq, first = np.unique(labels[valid], return_index=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    out[valid] = rank[np.searchsorted(uniq, labels[valid])]
    return out


def _bin_seeds(x: np.ndarray, bin_size: float) -> np.ndarray:
    bins = np.floor(x / bin_size).astype(np.int64)
    _, inv = np.unique(bins, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    sums = np.zeros((len(counts), x.shape[1]))
    np.add.at(sums, inv, x)
    return sums / counts[:, None]


def mean_shift(embeddings, cfg: MeanShiftConfig | None = None) -> np.ndarray:
    """Cluster rows of ``embeddings``; returns dense ids in order of first appearance.

    Seeds start at every point (or at bandwidth-grid bin means when there are
    more points than ``cfg.max_seeds``) and repeatedly jump to the mean of the
    points within ``bandwidth``. Seeds that land on identical coordinates share
    every later step, so they are collapsed as they meet.
    """
    cfg = cfg or MeanShiftConfig()
    x = np.asarray(embeddings.data if hasattr(embeddings, "data") else embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise UsageError("mean_shift needs a nonempty P×c array")
    seeds = x if len(x) <= cfg.max_seeds else _bin_seeds(x, cfg.bandwidth)
    seeds = np.unique(seeds, axis=0)
    active = np.ones(len(seeds), dtype=bool)
    for _ in range(cfg.max_iters):
        if not active.any():
            break
        cur = seeds[active]
        within = cdist(cur, x) <= cfg.bandwidth
        counts = within.sum(axis=1)
        moved = cur.copy()
        has = counts > 0
        moved[has] = (within[has].astype(np.float64) @ x) / counts[has, None]
        shift = np.linalg.norm(moved - cur, axis=1)
        seeds[active] = moved
        idx = np.flatnonzero(active)
        active[idx[shift < cfg.convergence_eps]] = False
        # collapse coincident seeds, keeping the active flag if any copy is active
        seeds, inv = np.unique(seeds, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        merged = np.zeros(len(seeds), dtype=bool)
        np.logical_or.at(merged, inv, active)
        active = merged

    modes = _merge_modes(seeds, x, cfg)
    nearest = np.argmin(cdist(x, modes), axis=1)
    return _dense_by_first_seen(nearest)


def _merge_modes(modes: np.ndarray, x: np.ndarray, cfg: MeanShiftConfig) -> np.ndarray:
    support = (cdist(modes, x) <= cfg.bandwidth).sum(axis=1)
    # strongest support first, then lexicographic coordinates (np.lexsort keys run minor → major)
    order = np.lexsort(tuple(modes[:, j] for j in reversed(range(modes.shape[1]))) + (-support,))
    kept: list[np.ndarray] = []
    for i in order:
        m = modes[i]
        if all(np.linalg.norm(m - k) >= cfg.merge_radius for k in kept):
            kept.append(m)
    return np.array(kept)


def assign_class(cluster_ids, point_classes) -> InstancePrediction:
    """Majority vote of the points' predicted classes per cluster (ties → smaller class)."""
    ids = np.asarray(cluster_ids, dtype=np.int64)
    cls = np.asarray(point_classes, dtype=np.int64)
    if len(ids) != len(cls):
        raise UsageError("assign_class: cluster ids and classes must be aligned")
    k = int(ids.max()) + 1 if len(ids) else 0
    n_cls = int(cls.max()) + 1 if len(cls) else 0
    votes = np.zeros((k, max(n_cls, 1)), dtype=np.int64)
    np.add.at(votes, (ids, cls), 1)
    winners = votes.argmax(axis=1)  # argmax returns the first maximum, i.e. the smaller class id
    sizes = votes.sum(axis=1)
    conf = votes[np.arange(k), winners] / np.maximum(sizes, 1)
    return InstancePrediction(ids, winners, sizes, conf)


# --------------------------------------------------------------------------
# block merging


@dataclass
class MergeGrid:
    voxel_size: float = 0.05
    origin: np.ndarray | None = None

    def voxel_keys(self, xyz: np.ndarray) -> np.ndarray:
        v = np.floor((xyz - self.origin) / self.voxel_size).astype(np.int64)
        # pack three nonnegative cell coordinates into one integer key
        return (v[:, 0] << 42) | (v[:, 1] << 21) | v[:, 2]


@dataclass
class BlockPrediction:
    origin: tuple[float, float] | None
    indices: np.ndarray | None
    prediction: InstancePrediction
    grid_pos: tuple[int, int] | None = None


def snake_order(blocks: list[BlockPrediction], stride: float = 0.5) -> list[int]:
    """Boustrophedon traversal: rows by y, alternating x direction per row."""
    pos = []
    for b in blocks:
        if b.grid_pos is not None:
            pos.append(b.grid_pos)
        else:
            pos.append((int(round(b.origin[0] / stride)), int(round(b.origin[1] / stride))))
    rows = sorted({p[1] for p in pos})
    row_rank = {r: i for i, r in enumerate(rows)}

    def key(i):
        x, y = pos[i]
        return y, x if row_rank[y] % 2 == 0 else -x

    return sorted(range(len(blocks)), key=key)


def block_merge(blocks: list[BlockPrediction], scene_xyz: np.ndarray, grid: MergeGrid | None = None,
                iou_threshold: float = 0.3, stride: float = 0.5) -> InstancePrediction:
    """Stitch per-block instances into scene instances.

    Blocks are visited in snake order. Each incoming instance looks at the
    voxels it shares with instances already placed (the overlap region); if the
    fraction of those voxels held by one same-class scene instance reaches
    ``iou_threshold`` it joins that instance, otherwise it gets a new id.
    Voxels and points keep the first scene id written to them.
    """
    grid = grid or MergeGrid()
    scene_xyz = np.asarray(scene_xyz, dtype=np.float64)
    for b in blocks:
        if b.indices is None or (b.origin is None and b.grid_pos is None):
            raise UsageError("block_merge: every block needs an origin and an index map")
    if grid.origin is None:
        grid.origin = scene_xyz.min(axis=0) - grid.voxel_size
    vox_all = grid.voxel_keys(scene_xyz)
    uniq_vox, vox_of_point = np.unique(vox_all, return_inverse=True)
    vox_of_point = vox_of_point.reshape(-1)
    vox_label = np.full(len(uniq_vox), -1, dtype=np.int64)
    point_label = np.full(len(scene_xyz), -1, dtype=np.int64)
    classes: list[int] = []

    for bi in snake_order(blocks, stride):
        blk = blocks[bi]
        idx = np.asarray(blk.indices, dtype=np.int64)
        pred = blk.prediction
        snapshot = vox_label.copy()
        assigned = np.empty(pred.num_instances, dtype=np.int64)
        for g in range(pred.num_instances):
            pts = idx[pred.point_instance_ids == g]
            vox = np.unique(vox_of_point[pts])
            held = snapshot[vox]
            held = held[held >= 0]
            target = -1
            if len(held):
                cand, cnt = np.unique(held, return_counts=True)
                same = np.array([classes[c] == pred.instance_classes[g] for c in cand])
                if same.any():
                    cand, cnt = cand[same], cnt[same]
                    best = np.argmax(cnt)  # ties resolve to the smaller scene id
                    if cnt[best] / len(held) >= iou_threshold:
                        target = int(cand[best])
            if target < 0:
                target = len(classes)
                classes.append(int(pred.instance_classes[g]))
            assigned[g] = target
        for g in range(pred.num_instances):
            pts = idx[pred.point_instance_ids == g]
            vox = vox_of_point[pts]
            free = vox_label[vox] < 0
            vox_label[vox[free]] = assigned[g]
            fresh = pts[point_label[pts] < 0]
            point_label[fresh] = assigned[g]

    # drop ids that lost all their points, keeping allocation order
    live = np.bincount(point_label[point_label >= 0], minlength=len(classes)) > 0
    new_id = np.cumsum(live) - 1
    final = np.where(point_label >= 0, new_id[np.maximum(point_label, 0)], -1)
    inst_classes = np.asarray(classes, dtype=np.int64)[live]
    sizes = np.bincount(final[final >= 0], minlength=len(inst_classes))
    return InstancePrediction(final, inst_classes, sizes)
