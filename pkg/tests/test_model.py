import numpy as np
import pytest

from mpnet.config import RunConfig, apply_variant
from mpnet.model import MPNet
from mpnet.numerics import finite_diff_check
from oracles import toy_batch


def small_model(variant="full", **overrides):
    cfg = apply_variant(RunConfig(hidden_widths="6,8", feature_dim=5, shared_dim=7, per_class_slots=2,
                                  centroid_hidden=4, **overrides), variant)
    return MPNet(cfg.model_config(), seed=3)


@pytest.mark.parametrize("variant", ["baseline", "fl", "insmem", "segmem", "full"])
def test_objective_gradient_every_variant(variant, rng):
    model = small_model(variant)
    batch, labels = toy_batch(rng)
    report = finite_diff_check(lambda: model.objective(batch, labels)[0], model.parameters(), max_per_param=6,
                               rng=rng, skip_kinks=True)
    assert report.passed, report


def test_memory_parameters_only_when_used():
    assert "memory.m" not in small_model("baseline").params
    assert "memory.m" not in small_model("fl").params
    assert "memory.m" in small_model("insmem").params
    assert "memory.m" in small_model("full").params


def test_zero_lambda_leaves_centroid_head_without_gradient(rng):
    model = small_model("full", lambda_ins=0.0)
    batch, labels = toy_batch(rng)
    total, parts, _ = model.objective(batch, labels)
    assert parts.reg_ins is not None  # still computed and logged
    total.backward()
    assert all(p.grad is None for p in model.g_params.values())
    assert model.params["enc.proj.w"].grad is not None


def test_forward_shapes(rng):
    model = small_model("full")
    batch, labels = toy_batch(rng, num_points=20)
    out = model.forward(batch)
    assert out.probs.shape == (20, 6)
    assert out.embeddings.shape == (20, 5)
    assert out.w_ins.shape == (20, 12)
    assert out.alpha_seg.shape == (20, 6)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0)


def test_retrieved_features_replace_branch_features(rng):
    model = small_model("segmem")
    batch, _ = toy_batch(rng)
    out = model.forward(batch)
    np.testing.assert_allclose(out.fhat_seg.data, out.alpha_seg.data @ out.summary.data, atol=1e-14)
    np.testing.assert_allclose(out.fhat_ins.data, out.w_ins.data @ model.params["memory.m"].data, atol=1e-14)


def test_same_seed_same_parameters():
    a, b = small_model(), small_model()
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
