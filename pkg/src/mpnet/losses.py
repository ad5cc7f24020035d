"""Training objectives: squashed cross-entropy, focal loss, the discriminative
embedding loss, the centroid regularizer on retrieved instance features and
the margin regularizer on the semantic summary."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    EPS_NORM,
    Parameter,
    Tensor,
    UsageError,
    add_scalar,
    affine,
    divide,
    gather_rows,
    log,
    mean_all,
    mul,
    pairwise_distance,
    pick,
    power,
    relu,
    row_norm,
    row_softmax,
    row_sum,
    scale,
    segment_mean,
    square,
    sub,
    weighted_sum,
)


@dataclass
class LossConfig:
    margin_m: float = 5.0
    sigma_v: float = 0.5
    sigma_d: float = 1.5
    lambda_ins: float = 0.1
    embed_dim: int = 5
    focal_gamma: float = 2.0
    use_squash: bool = True
    use_focal: bool = False
    use_reg_seg: bool = True
    use_reg_ins: bool = True

    def __post_init__(self):
        if not self.sigma_d > self.sigma_v > 0:
            raise ValueError("need sigma_d > sigma_v > 0")
        if self.margin_m <= 0:
            raise ValueError("margin_m must be positive")
        if self.lambda_ins < 0:
            raise ValueError("lambda_ins must be nonnegative")


@dataclass
class LabeledBatch:
    """Per-point labels for a (possibly multi-block) batch.

    Instance ids are dense over the whole batch; ``sample_ids`` groups them into
    blocks so per-block averages can be taken the way a per-sample loss would.
    """

    semantic_labels: np.ndarray
    instance_labels: np.ndarray
    xyz: np.ndarray
    sample_ids: np.ndarray | None = None

    def __post_init__(self):
        self.semantic_labels = np.asarray(self.semantic_labels, dtype=np.int64)
        ids = np.asarray(self.instance_labels, dtype=np.int64)
        if self.sample_ids is None:
            self.sample_ids = np.zeros(len(ids), dtype=np.int64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        # dense ids over (block, instance) pairs
        _, self.instance_labels = np.unique(np.column_stack([self.sample_ids, ids]), axis=0, return_inverse=True)
        self.instance_labels = self.instance_labels.reshape(-1)
        self.num_instances = int(self.instance_labels.max()) + 1 if len(ids) else 0
        self.xyz = np.asarray(self.xyz, dtype=np.float64)

    @property
    def instance_centroids(self) -> np.ndarray:
        """Mean xyz of each instance's points within the batch (K×3)."""
        k = self.num_instances
        sums = np.zeros((k, 3))
        np.add.at(sums, self.instance_labels, self.xyz[:, :3])
        return sums / np.bincount(self.instance_labels, minlength=k)[:, None]

    def instance_blocks(self) -> np.ndarray:
        blk = np.zeros(self.num_instances, dtype=np.int64)
        blk[self.instance_labels] = self.sample_ids
        return blk


def _instance_weights(instance_blocks: np.ndarray) -> np.ndarray:
    """Weight 1/(K_b * B) per instance so summing gives a mean over blocks of per-block means."""
    _, blk = np.unique(instance_blocks, return_inverse=True)
    k_per_block = np.bincount(blk)
    return 1.0 / (k_per_block[blk] * len(k_per_block))


# --------------------------------------------------------------------------
# classification


def squash(v: Tensor, eps: float = EPS_NORM) -> Tensor:
    """v * |v| / (1 + |v|^2); the zero vector maps to zero."""
    n = row_norm(v, eps)
    factor = divide(n, add_scalar(square(n), 1.0))
    return mul(v, factor)


def class_probabilities(f_seg: Tensor, fc_w: Parameter, fc_b: Parameter, use_squash: bool = True) -> Tensor:
    logits = affine(f_seg, fc_w.tensor, fc_b.tensor)
    if use_squash:
        logits = squash(logits)
    return row_softmax(logits)


def cross_entropy(probs: Tensor, labels: np.ndarray) -> Tensor:
    return scale(mean_all(log(pick(probs, labels))), -1.0)


def squash_classify(f_seg: Tensor, fc_w: Parameter, fc_b: Parameter, labels, use_squash: bool = True):
    """Return (mean cross-entropy, per-point class probabilities)."""
    probs = class_probabilities(f_seg, fc_w, fc_b, use_squash)
    return cross_entropy(probs, np.asarray(labels)), probs


def focal_loss(probs: Tensor, labels, gamma: float) -> Tensor:
    """Mean of -(1 - p_y)^gamma * ln p_y."""
    p_y = pick(probs, np.asarray(labels))
    logp = log(p_y, floor=1e-12)
    if gamma == 0:
        return scale(mean_all(logp), -1.0)
    one_minus = add_scalar(scale(p_y, -1.0), 1.0)
    weight = power(one_minus, gamma)
    return scale(mean_all(mul(weight, logp)), -1.0)


# --------------------------------------------------------------------------
# instance embedding


def discriminative_loss(e: Tensor, instance_labels, sigma_v: float = 0.5, sigma_d: float = 1.5,
                        sample_ids=None) -> Tensor:
    """Pull-to-mean hinge within sigma_v plus push-apart hinge below 2*sigma_d.

    With ``sample_ids`` the loss is computed per block and averaged.
    """
    if e.shape[0] == 0:
        raise UsageError("discriminative_loss: empty batch")
    batch = instance_labels if isinstance(instance_labels, LabeledBatch) else None
    if batch is None:
        lab = np.asarray(instance_labels, dtype=np.int64)
        sids = np.zeros(len(lab), dtype=np.int64) if sample_ids is None else np.asarray(sample_ids)
        batch = LabeledBatch(np.zeros(len(lab)), lab, np.zeros((len(lab), 3)), sids)
    ids, k = batch.instance_labels, batch.num_instances
    inst_blocks = batch.instance_blocks()
    weights = _instance_weights(inst_blocks)

    mu = segment_mean(e, ids, k)
    dist = row_norm(sub(e, gather_rows(mu, ids)))
    pull_pp = square(relu(add_scalar(dist, -sigma_v)))
    pull = weighted_sum(segment_mean(pull_pp, ids, k), weights)

    same = inst_blocks[:, None] == inst_blocks[None, :]
    np.fill_diagonal(same, False)
    if not same.any():
        return pull
    _, blk = np.unique(inst_blocks, return_inverse=True)
    k_b = np.bincount(blk)[blk].astype(float)
    n_blocks = len(np.unique(inst_blocks))
    pair_w = np.where(same, 1.0 / (k_b * np.maximum(k_b - 1, 1))[:, None], 0.0) / n_blocks
    push_hinge = square(relu(add_scalar(scale(pairwise_distance(mu, mu), -1.0), 2.0 * sigma_d)))
    return pull + weighted_sum(push_hinge, pair_w)


def centroid_head(f: Tensor, g_params: dict[str, Parameter]) -> Tensor:
    h = relu(affine(f, g_params["g.0.w"].tensor, g_params["g.0.b"].tensor))
    return affine(h, g_params["g.1.w"].tensor, g_params["g.1.b"].tensor)


def instance_regularizer(f_ins: Tensor, g_params: dict[str, Parameter], batch: LabeledBatch) -> Tensor:
    """Mean over instances of the mean squared error between each point's
    predicted centroid and its instance's true centroid."""
    pred = centroid_head(f_ins, g_params)
    target = Tensor(batch.instance_centroids[batch.instance_labels])
    err = row_sum(square(sub(pred, target)))
    per_inst = segment_mean(err, batch.instance_labels, batch.num_instances)
    return weighted_sum(per_inst, _instance_weights(batch.instance_blocks()))


def semantic_regularizer(f_seg: Tensor, summary: Tensor, labels, margin: float = 5.0) -> Tensor:
    """Mean over points of max(0, d(own centroid) - Σ d(other centroids) + margin)."""
    labels = np.asarray(labels, dtype=np.int64)
    d = pairwise_distance(f_seg, summary)
    sign = -np.ones(d.shape)
    sign[np.arange(len(labels)), labels] = 1.0
    signed = mul(d, Tensor(sign))
    return mean_all(relu(add_scalar(row_sum(signed), margin)))


# --------------------------------------------------------------------------


@dataclass
class LossParts:
    ce: Tensor
    dis: Tensor
    reg_seg: Tensor | None = None
    reg_ins: Tensor | None = None

    def values(self) -> dict[str, float]:
        out = {"L_ce": self.ce.item(), "L_dis": self.dis.item()}
        out["R_seg"] = self.reg_seg.item() if self.reg_seg is not None else 0.0
        out["R_ins"] = self.reg_ins.item() if self.reg_ins is not None else 0.0
        return out


def total_objective(parts: LossParts, lambda_ins: float = 0.1) -> Tensor:
    """L_ce + L_dis + R_seg + lambda * R_ins; absent terms are treated as zero."""
    total = parts.ce + parts.dis
    if parts.reg_seg is not None:
        total = total + parts.reg_seg
    if parts.reg_ins is not None and lambda_ins != 0:
        total = total + scale(parts.reg_ins, lambda_ins)
    return total
