import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpnet.losses import (
    LabeledBatch,
    LossConfig,
    LossParts,
    centroid_head,
    class_probabilities,
    cross_entropy,
    discriminative_loss,
    focal_loss,
    instance_regularizer,
    semantic_regularizer,
    squash,
    squash_classify,
    total_objective,
)
from mpnet.numerics import Parameter, Tensor, UsageError, finite_diff_check


class TestSquash:
    def test_norm_at_one(self):
        assert np.linalg.norm(squash(Tensor([[0.6, 0.8]])).data) == pytest.approx(0.5)

    @given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)))
    def test_norm_formula_and_bound(self, v):
        n = np.linalg.norm(v, axis=1)
        out = np.linalg.norm(squash(Tensor(v)).data, axis=1)
        np.testing.assert_allclose(out, n ** 2 / (1 + n ** 2), atol=1e-12)
        assert (out < 1).all()

    def test_zero_vector_gives_uniform_and_log_c(self):
        fc_w, fc_b = Parameter.of(np.zeros((3, 6))), Parameter.of(np.zeros((1, 6)))
        loss, probs = squash_classify(Tensor(np.ones((2, 3))), fc_w, fc_b, [0, 4])
        np.testing.assert_allclose(probs.data, 1 / 6)
        assert loss.item() == pytest.approx(math.log(6))

    def test_toggle_off_is_plain_softmax(self, rng):
        f = Tensor(rng.normal(size=(5, 3)))
        w, b = Parameter.of(rng.normal(size=(3, 4))), Parameter.of(rng.normal(size=(1, 4)))
        logits = f.data @ w.data + b.data
        ref = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(class_probabilities(f, w, b, use_squash=False).data, ref, atol=1e-14)

    def test_gradient(self, rng):
        f = Parameter.of(rng.normal(size=(6, 3)))
        w, b = Parameter.of(rng.normal(size=(3, 4))), Parameter.of(rng.normal(size=(1, 4)))
        labels = rng.integers(0, 4, 6)
        report = finite_diff_check(lambda: squash_classify(f.tensor, w, b, labels)[0], [f, w, b])
        assert report.passed, report


class TestFocal:
    def test_gamma_zero_is_cross_entropy(self, rng):
        p = rng.dirichlet(np.ones(5), size=10)
        labels = rng.integers(0, 5, 10)
        assert abs(focal_loss(Tensor(p), labels, 0.0).item() - cross_entropy(Tensor(p), labels).item()) <= 1e-12

    def test_certain_point_contributes_zero(self):
        assert focal_loss(Tensor([[1.0, 0.0]]), [0], 2.0).item() == 0.0

    def test_half_probability(self):
        assert focal_loss(Tensor([[0.5, 0.5]]), [0], 2.0).item() == pytest.approx(0.25 * math.log(2))

    def test_zero_probability_is_clamped(self):
        assert np.isfinite(focal_loss(Tensor([[0.0, 1.0]]), [0], 2.0).item())


class TestDiscriminative:
    def test_hand_case_is_four(self):
        e = Tensor([[0.0], [0.0], [1.0], [1.0]])
        assert discriminative_loss(e, [0, 0, 1, 1], 0.5, 1.5).item() == 4.0

    def test_single_instance_equal_embeddings(self):
        assert discriminative_loss(Tensor(np.ones((5, 3))), np.zeros(5)).item() == 0.0

    def test_hinges_satisfied(self):
        e = Tensor([[0.0, 0.1], [0.0, -0.1], [4.0, 0.2], [4.0, -0.2]])
        assert discriminative_loss(e, [0, 0, 1, 1]).item() == 0.0

    def test_empty(self):
        with pytest.raises(UsageError):
            discriminative_loss(Tensor(np.zeros((0, 2))), [])

    @given(arrays(np.float64, (8, 2), elements=st.floats(-3, 3)), st.floats(-10, 10), st.floats(-10, 10))
    def test_translation_invariant(self, e, dx, dy):
        labels = np.array([0, 0, 1, 1, 2, 2, 2, 0])
        a = discriminative_loss(Tensor(e), labels).item()
        b = discriminative_loss(Tensor(e + [dx, dy]), labels).item()
        assert a == pytest.approx(b, rel=1e-9, abs=1e-9)

    @given(st.floats(0.0, 2.9), st.floats(0.0, 0.1))
    def test_push_monotone(self, gap, extra):
        def at(g):
            return discriminative_loss(Tensor([[0.0], [g]]), [0, 1]).item()

        assert at(min(gap + extra, 3.0)) <= at(gap) + 1e-15

    def test_blocks_are_averaged(self):
        # two blocks: the hand case and a satisfied pair, averaged → 2.0
        e = Tensor([[0.0], [0.0], [1.0], [1.0], [0.0], [0.0], [9.0], [9.0]])
        loss = discriminative_loss(e, [0, 0, 1, 1, 0, 0, 1, 1], sample_ids=[0, 0, 0, 0, 1, 1, 1, 1])
        assert loss.item() == pytest.approx(2.0)

    def test_gradient(self, rng):
        e = Parameter.of(rng.normal(size=(10, 3)))
        labels = rng.integers(0, 3, 10)
        report = finite_diff_check(lambda: discriminative_loss(e.tensor, labels), [e], skip_kinks=True)
        assert report.passed, report


def g_params(rng, d=4, hidden=5):
    return {"g.0.w": Parameter.of(rng.normal(size=(d, hidden))), "g.0.b": Parameter.of(rng.normal(size=(1, hidden))),
            "g.1.w": Parameter.of(rng.normal(size=(hidden, 3))), "g.1.b": Parameter.of(rng.normal(size=(1, 3)))}


class TestInstanceRegularizer:
    def test_exact_output_is_zero(self, rng):
        g = g_params(rng)
        xyz = rng.normal(size=(3, 3))
        batch = LabeledBatch([0, 0, 0], [7, 7, 7], xyz)
        g["g.1.w"].tensor.data[...] = 0
        g["g.1.b"].tensor.data[...] = xyz.mean(axis=0)
        assert instance_regularizer(Tensor(rng.normal(size=(3, 4))), g, batch).item() == pytest.approx(0, abs=1e-24)

    def test_unit_offset(self, rng):
        g = g_params(rng)
        g["g.1.w"].tensor.data[...] = 0
        g["g.1.b"].tensor.data[...] = [[1.0, 2.0, 4.0]]
        batch = LabeledBatch([1], [0], [[1.0, 2.0, 3.0]])
        assert instance_regularizer(Tensor(rng.normal(size=(1, 4))), g, batch).item() == 1.0

    def test_matches_double_loop(self, rng):
        g = g_params(rng)
        f = Tensor(rng.normal(size=(4, 4)))
        xyz = rng.normal(size=(4, 3))
        ins = np.array([0, 0, 1, 1])
        out = centroid_head(f, g).data
        expected = 0.0
        for k in (0, 1):
            pts = np.flatnonzero(ins == k)
            gt = xyz[pts].mean(axis=0)
            expected += sum(np.sum((out[n] - gt) ** 2) for n in pts) / len(pts)
        expected /= 2
        got = instance_regularizer(f, g, LabeledBatch([0] * 4, ins, xyz)).item()
        assert got == pytest.approx(expected, rel=1e-12)

    def test_gradient(self, rng):
        g = g_params(rng)
        f = Parameter.of(rng.normal(size=(6, 4)))
        batch = LabeledBatch(np.zeros(6), [0, 0, 1, 1, 2, 2], rng.normal(size=(6, 3)), [0, 0, 0, 1, 1, 1])
        report = finite_diff_check(lambda: instance_regularizer(f.tensor, g, batch), [f, *g.values()],
                                   skip_kinks=True)
        assert report.passed, report


class TestSemanticRegularizer:
    def test_three_centroid_case_is_zero(self):
        centroids = Tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 4.0]])
        assert semantic_regularizer(Tensor([[0.0, 0.0]]), centroids, [0], 5.0).item() == 0.0

    def test_equidistant_two_classes_gives_margin(self):
        centroids = Tensor([[1.0, 0.0], [-1.0, 0.0]])
        assert semantic_regularizer(Tensor([[0.0, 3.0]]), centroids, [1], 5.0).item() == pytest.approx(5.0)

    def test_on_centroid_far_from_others(self):
        centroids = Tensor([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
        assert semantic_regularizer(Tensor([[0.0, 0.0]]), centroids, [0], 5.0).item() == 0.0

    def test_gradient_reaches_features_and_summary(self, rng):
        f, c = Parameter.of(rng.normal(size=(5, 3))), Parameter.of(rng.normal(size=(4, 3)))
        labels = rng.integers(0, 4, 5)
        report = finite_diff_check(lambda: semantic_regularizer(f.tensor, c.tensor, labels, 5.0), [f, c],
                                   skip_kinks=True)
        assert report.passed and report.checked > 0, report


class TestTotal:
    def test_all_zero(self):
        z = Tensor([[0.0]])
        assert total_objective(LossParts(z, z, z, z)).item() == 0.0

    def test_weighting(self):
        parts = LossParts(Tensor([[1.0]]), Tensor([[2.0]]), Tensor([[3.0]]), Tensor([[10.0]]))
        assert total_objective(parts, 0.1).item() == pytest.approx(7.0)
        assert total_objective(LossParts(Tensor([[1.0]]), Tensor([[2.0]])), 0.1).item() == 3.0

    def test_config_invariants(self):
        with pytest.raises(ValueError):
            LossConfig(sigma_v=2.0, sigma_d=1.0)
        with pytest.raises(ValueError):
            LossConfig(margin_m=0)
        with pytest.raises(ValueError):
            LossConfig(lambda_ins=-1)


@given(st.integers(0, 1000))
def test_losses_nonnegative(seed):
    rng = np.random.default_rng(seed)
    e = Tensor(rng.normal(size=(8, 3)))
    labels = rng.integers(0, 3, 8)
    assert discriminative_loss(e, labels).item() >= 0
    assert semantic_regularizer(e, Tensor(rng.normal(size=(3, 3))), labels).item() >= 0
    p = Tensor(rng.dirichlet(np.ones(3), size=8))
    assert focal_loss(p, labels, 2.0).item() >= 0 and cross_entropy(p, labels).item() >= 0
