"""Shared point encoder with grid-cell and global max pooling, plus the two
branch decoders that emit semantic and instance query features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Parameter,
    Tensor,
    UsageError,
    affine,
    concat_cols,
    gather_rows,
    relu,
    segment_max,
)


@dataclass
class EncoderConfig:
    input_dim: int = 6
    hidden_widths: list[int] = field(default_factory=lambda: [32, 64])
    feature_dim: int = 32
    shared_dim: int = 64
    grid_cell: float = 0.25
    room_xyz: bool = False

    def __post_init__(self):
        if not self.hidden_widths or min(self.hidden_widths) <= 0:
            raise ValueError("hidden_widths must be a nonempty list of positive widths")
        if self.feature_dim <= 0 or self.shared_dim <= 0 or self.grid_cell <= 0:
            raise ValueError("feature_dim, shared_dim and grid_cell must be positive")
        if self.room_xyz and self.input_dim == 6:
            self.input_dim = 9


class PointBatch:
    """One or more blocks of points stacked into a single P×K matrix.

    ``points`` columns are block-normalized xyz, rgb and (optionally) room-
    normalized xyz. ``sample_ids`` says which block each row came from; global
    pooling is done per block and grid pooling per (block, cell).
    """

    def __init__(self, points: np.ndarray, sample_ids: np.ndarray | None = None, grid_cell: float = 0.25):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0:
            raise UsageError("PointBatch needs a nonempty P×K array")
        if not np.isfinite(points).all():
            raise UsageError("PointBatch contains non-finite values")
        self.points = points
        self.count = points.shape[0]
        if sample_ids is None:
            sample_ids = np.zeros(self.count, dtype=np.int64)
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        _, self.sample_ids = np.unique(sample_ids, return_inverse=True)
        self.num_samples = int(self.sample_ids.max()) + 1
        cells = np.floor(points[:, :3] / grid_cell).astype(np.int64)
        key = np.column_stack([self.sample_ids, cells])
        _, self.cell_ids = np.unique(key, axis=0, return_inverse=True)
        self.cell_ids = self.cell_ids.reshape(-1)
        self.num_cells = int(self.cell_ids.max()) + 1

    def permuted(self, perm: np.ndarray, grid_cell: float = 0.25) -> "PointBatch":
        return PointBatch(self.points[perm], self.sample_ids[perm], grid_cell)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dense(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> tuple[Parameter, Parameter]:
    w = Parameter.of(glorot(rng, fan_in, fan_out), name=f"{name}.w")
    b = Parameter.of(np.zeros((1, fan_out)), name=f"{name}.b")
    return w, b


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    widths = [cfg.input_dim] + list(cfg.hidden_widths)
    for i in range(len(cfg.hidden_widths)):
        params[f"enc.mlp{i}.w"], params[f"enc.mlp{i}.b"] = dense(rng, widths[i], widths[i + 1], f"enc.mlp{i}")
    last = widths[-1]
    params["enc.proj.w"], params["enc.proj.b"] = dense(rng, 3 * last, cfg.shared_dim, "enc.proj")
    for branch in ("seg", "ins"):
        hid = cfg.feature_dim
        params[f"dec_{branch}.0.w"], params[f"dec_{branch}.0.b"] = dense(rng, cfg.shared_dim, hid, f"dec_{branch}.0")
        params[f"dec_{branch}.1.w"], params[f"dec_{branch}.1.b"] = dense(rng, hid, cfg.feature_dim, f"dec_{branch}.1")
    return params


def _t(params: dict[str, Parameter], key: str) -> Tensor:
    return params[key].tensor


def encode(batch: PointBatch, cfg: EncoderConfig, params: dict[str, Parameter]) -> Tensor:
    """Per-point features (P×H) mixing each point's own MLP feature with the
    max-pooled feature of its grid cell and of its whole block."""
    if batch.count == 0:
        raise UsageError("encode: empty batch")
    if batch.points.shape[1] != cfg.input_dim:
        raise UsageError(f"encode: expected {cfg.input_dim} input columns, got {batch.points.shape[1]}")
    h = Tensor(batch.points)
    for i in range(len(cfg.hidden_widths)):
        h = relu(affine(h, _t(params, f"enc.mlp{i}.w"), _t(params, f"enc.mlp{i}.b")))
    cell = gather_rows(segment_max(h, batch.cell_ids, batch.num_cells), batch.cell_ids)
    glob = gather_rows(segment_max(h, batch.sample_ids, batch.num_samples), batch.sample_ids)
    mixed = concat_cols([h, cell, glob])
    return relu(affine(mixed, _t(params, "enc.proj.w"), _t(params, "enc.proj.b")))


def _decode(shared: Tensor, params: dict[str, Parameter], branch: str) -> Tensor:
    h = relu(affine(shared, _t(params, f"dec_{branch}.0.w"), _t(params, f"dec_{branch}.0.b")))
    return affine(h, _t(params, f"dec_{branch}.1.w"), _t(params, f"dec_{branch}.1.b"))


def decode_seg(shared: Tensor, params: dict[str, Parameter]) -> Tensor:
    return _decode(shared, params, "seg")


def decode_ins(shared: Tensor, params: dict[str, Parameter]) -> Tensor:
    return _decode(shared, params, "ins")
