"""Semantic (oAcc, mAcc, mIoU) and instance (mCov, mWCov, mPrec, mRec)
evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grouping import InstancePrediction
from .numerics import UsageError


@dataclass
class SemanticReport:
    oAcc: float
    mAcc: float
    mIoU: float
    per_class_iou: np.ndarray
    per_class_acc: np.ndarray = field(default=None)

    def as_dict(self) -> dict[str, float]:
        return {"oAcc": self.oAcc, "mAcc": self.mAcc, "mIoU": self.mIoU}


@dataclass
class InstanceReport:
    mCov: float
    mWCov: float
    mPrec: float
    mRec: float
    per_class: dict = field(default_factory=dict)

    def as_dict(self) -> dict[str, float]:
        return {"mCov": self.mCov, "mWCov": self.mWCov, "mPrec": self.mPrec, "mRec": self.mRec}


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise UsageError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def semantic_metrics(pred_classes, gt_classes, num_classes: int | None = None) -> SemanticReport:
    """Point accuracy, class-mean recall and IoU; classes absent from both sides are ignored."""
    pred = np.asarray(pred_classes, dtype=np.int64)
    gt = np.asarray(gt_classes, dtype=np.int64)
    if pred.shape != gt.shape:
        raise UsageError(f"length mismatch: {pred.shape} vs {gt.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    cm = confusion(pred, gt, num_classes)
    tp = np.diag(cm).astype(float)
    gt_n = cm.sum(axis=1).astype(float)
    pred_n = cm.sum(axis=0).astype(float)
    union = gt_n + pred_n - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt_n > 0, tp / gt_n, np.nan)
    present = gt_n > 0
    return SemanticReport(
        oAcc=float(tp.sum() / max(len(gt), 1)),
        mAcc=float(np.mean(acc[present])) if present.any() else 0.0,
        mIoU=float(np.mean(np.nan_to_num(iou[present]))) if present.any() else 0.0,
        per_class_iou=iou,
        per_class_acc=acc,
    )


def instance_sets(ids: np.ndarray, classes_of) -> list[tuple[int, np.ndarray]]:
    """(class, point indices) for every id >= 0."""
    ids = np.asarray(ids, dtype=np.int64)
    valid = np.flatnonzero(ids >= 0)
    out = []
    for uid in np.unique(ids[valid]):
        pts = valid[ids[valid] == uid]
        out.append((int(classes_of(uid, pts)), pts))
    return out


def iou_matrix(gts: list[np.ndarray], preds: list[np.ndarray], num_points: int) -> np.ndarray:
    if not gts or not preds:
        return np.zeros((len(gts), len(preds)))
    g = np.full(num_points, -1)
    for i, pts in enumerate(gts):
        g[pts] = i
    p = np.full(num_points, -1)
    for j, pts in enumerate(preds):
        p[pts] = j
    both = (g >= 0) & (p >= 0)
    inter = np.zeros((len(gts), len(preds)))
    np.add.at(inter, (g[both], p[both]), 1)
    gs = np.array([len(x) for x in gts], dtype=float)[:, None]
    ps = np.array([len(x) for x in preds], dtype=float)[None, :]
    return inter / (gs + ps - inter)


def greedy_true_positives(iou: np.ndarray, threshold: float) -> int:
    """One-to-one matching in descending IoU order, counting pairs at or above threshold."""
    if iou.size == 0:
        return 0
    gi, pj = np.nonzero(iou >= threshold)
    order = np.lexsort((pj, gi, -iou[gi, pj]))
    used_g, used_p, tp = set(), set(), 0
    for k in order:
        if gi[k] in used_g or pj[k] in used_p:
            continue
        used_g.add(gi[k])
        used_p.add(pj[k])
        tp += 1
    return tp


def instance_class_stats(pred: InstancePrediction, gt_semantic, gt_instance, num_classes: int | None = None,
                         iou_threshold: float = 0.5) -> dict[int, dict]:
    """Raw per-class counts for one scene: TP, #pred, #gt, summed best IoU and
    size-weighted best IoU. Summed over scenes these give dataset-level metrics."""
    gt_sem = np.asarray(gt_semantic, dtype=np.int64)
    gt_ins = np.asarray(gt_instance, dtype=np.int64)
    ids = np.asarray(pred.point_instance_ids, dtype=np.int64)
    if len(ids) != len(gt_ins):
        raise UsageError("instance_metrics: prediction and ground truth cover different point counts")
    n = len(ids)
    if num_classes is None:
        num_classes = int(max(gt_sem.max(initial=0), np.max(pred.instance_classes, initial=0))) + 1

    gt_sets = instance_sets(gt_ins, lambda uid, pts: np.bincount(gt_sem[pts]).argmax())
    pred_sets = instance_sets(ids, lambda uid, pts: pred.instance_classes[uid])
    stats = {}
    for c in range(num_classes):
        g = [pts for cls, pts in gt_sets if cls == c]
        p = [pts for cls, pts in pred_sets if cls == c]
        if not g and not p:
            continue
        iou = iou_matrix(g, p, n)
        best = iou.max(axis=1) if p else np.zeros(len(g))
        sizes = np.array([len(x) for x in g], dtype=float)
        stats[c] = {
            "tp": greedy_true_positives(iou, iou_threshold),
            "num_pred": len(p),
            "num_gt": len(g),
            "cov_sum": float(best.sum()),
            "wcov_num": float((best * sizes).sum()),
            "gt_points": float(sizes.sum()),
        }
    return stats


def merge_class_stats(items) -> dict[int, dict]:
    total: dict[int, dict] = {}
    for stats in items:
        for c, row in stats.items():
            acc = total.setdefault(c, dict.fromkeys(row, 0))
            for k, v in row.items():
                acc[k] += v
    return total


def summarize_instances(stats: dict[int, dict], classes=None) -> InstanceReport:
    """Class-averaged report from (merged) per-class counts.

    Cov/WCov/Rec average over classes with ground-truth instances; Prec
    averages over classes that have ground truth or predictions, so a class
    that is only predicted contributes precision 0. ``classes`` restricts the
    averages to a subset.
    """
    per_class = {}
    covs, wcovs, precs, recs = [], [], [], []
    for c in sorted(stats):
        if classes is not None and c not in classes:
            continue
        row = stats[c]
        prec = row["tp"] / row["num_pred"] if row["num_pred"] else 0.0
        entry = {"prec": prec, "num_gt": row["num_gt"], "num_pred": row["num_pred"], "tp": row["tp"]}
        precs.append(prec)
        if row["num_gt"]:
            entry.update(cov=row["cov_sum"] / row["num_gt"], wcov=row["wcov_num"] / row["gt_points"],
                         rec=row["tp"] / row["num_gt"])
            covs.append(entry["cov"])
            wcovs.append(entry["wcov"])
            recs.append(entry["rec"])
        per_class[c] = entry

    def m(xs):
        return float(np.mean(xs)) if xs else 0.0

    return InstanceReport(m(covs), m(wcovs), m(precs), m(recs), per_class)


def instance_metrics(pred: InstancePrediction, gt_semantic, gt_instance, num_classes: int | None = None,
                     iou_threshold: float = 0.5) -> InstanceReport:
    """mCov, mWCov, mPrec, mRec for one scene (IoU threshold 0.5 by default)."""
    return summarize_instances(instance_class_stats(pred, gt_semantic, gt_instance, num_classes, iou_threshold))
