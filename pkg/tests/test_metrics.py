import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpnet.grouping import InstancePrediction
from mpnet.metrics import (
    instance_class_stats,
    instance_metrics,
    merge_class_stats,
    semantic_metrics,
    summarize_instances,
)
from mpnet.numerics import UsageError
from oracles import brute_force_instance_metrics, random_tiny_scene


def prediction(ids, classes):
    ids = np.asarray(ids)
    return InstancePrediction(ids, np.asarray(classes), np.bincount(ids[ids >= 0]))


def worked_example():
    """Two chairs of 10 and 30 points; one predicted chair covers 18 of the large one."""
    gt_ins = np.repeat([0, 1], [10, 30])
    gt_sem = np.full(40, 4)
    ids = np.full(40, 1)
    ids[10:28] = 0
    ids[:10] = 2  # the small chair predicted as clutter
    return prediction(ids, [4, 5, 5]), gt_sem, gt_ins


class TestSemantic:
    def test_binary_case(self):
        rep = semantic_metrics(np.zeros(10, int), np.repeat([0, 1], 5))
        assert rep.oAcc == 0.5
        assert rep.per_class_iou.tolist() == [0.5, 0.0]
        assert rep.mIoU == 0.25

    def test_perfect(self, rng):
        gt = rng.integers(0, 6, 100)
        rep = semantic_metrics(gt, gt, 6)
        assert rep.oAcc == rep.mAcc == rep.mIoU == 1.0

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            semantic_metrics([0, 1], [0])


class TestInstance:
    def test_worked_example(self):
        pred, sem, ins = worked_example()
        per = instance_metrics(pred, sem, ins).per_class[4]
        assert (per["cov"], per["wcov"], per["prec"], per["rec"]) == (0.30, 0.45, 1.0, 0.5)

    def test_single_class_worked_example(self):
        gt_ins = np.repeat([0, 1], [10, 30])
        ids = np.full(40, -1)
        ids[10:28] = 0
        rep = instance_metrics(prediction(ids, [4]), np.full(40, 4), gt_ins)
        assert rep.as_dict() == {"mCov": 0.30, "mWCov": 0.45, "mPrec": 1.0, "mRec": 0.5}

    def test_just_below_threshold(self):
        # 49 of 100 points: IoU 0.49
        ids = np.full(100, -1)
        ids[:49] = 0
        rep = instance_metrics(prediction(ids, [2]), np.full(100, 2), np.zeros(100, int))
        assert rep.mPrec == 0.0 and rep.mRec == 0.0

    def test_length_mismatch(self):
        with pytest.raises(UsageError):
            instance_metrics(prediction([0, 0], [1]), [1, 1, 1], [0, 0, 0])

    @given(st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, seed):
        sem, ins, ids, classes = random_tiny_scene(np.random.default_rng(seed))
        got = instance_metrics(prediction(ids, classes), sem, ins).as_dict()
        assert got == brute_force_instance_metrics(ids, classes, sem, ins)

    @given(st.integers(0, 2**31 - 1))
    def test_invariant_to_id_relabeling(self, seed):
        rng = np.random.default_rng(seed)
        sem, ins, ids, classes = random_tiny_scene(rng)
        perm = rng.permutation(len(classes))
        relabeled = np.where(ids >= 0, perm[ids], -1)
        new_classes = np.empty_like(classes)
        new_classes[perm] = classes
        a = instance_metrics(prediction(ids, classes), sem, ins).as_dict()
        b = instance_metrics(prediction(relabeled, new_classes), sem, rng.permutation(ins.max() + 1)[ins]).as_dict()
        assert a == pytest.approx(b, abs=1e-15)

    def test_counts_aggregate_across_scenes(self):
        pred, sem, ins = worked_example()
        one = instance_class_stats(pred, sem, ins)
        merged = merge_class_stats([one, one])
        assert merged[4]["num_gt"] == 4 and merged[4]["tp"] == 2
        assert summarize_instances(merged).as_dict() == summarize_instances(one).as_dict()

    def test_class_subset(self):
        pred, sem, ins = worked_example()
        stats = instance_class_stats(pred, sem, ins)
        assert summarize_instances(stats, classes=(5,)).mPrec == 0.0
        assert summarize_instances(stats, classes=(4,)).mRec == 0.5

