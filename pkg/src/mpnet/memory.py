"""Prototype memory, its per-class summary and the two attention readers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Parameter, Tensor, UsageError, cosine_rows, matmul, row_softmax, scale


@dataclass(eq=False)
class PrototypeMemory:
    m: Parameter
    per_class_slots: int
    num_classes: int
    temperature: float = 0.1

    def __post_init__(self):
        n = self.per_class_slots * self.num_classes
        if self.m.shape[0] != n:
            raise ValueError(f"memory has {self.m.shape[0]} rows, "
                             f"expected {self.per_class_slots}x{self.num_classes}={n}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def num_slots(self) -> int:
        return self.m.shape[0]

    @property
    def dim(self) -> int:
        return self.m.shape[1]

    @classmethod
    def create(cls, per_class_slots: int, num_classes: int, dim: int, rng: np.random.Generator,
               temperature: float = 0.1) -> "PrototypeMemory":
        rows = rng.uniform(-0.1, 0.1, size=(per_class_slots * num_classes, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        return cls(Parameter.of(rows, name="memory.m"), per_class_slots, num_classes, temperature)

    def averaging_matrix(self) -> np.ndarray:
        a = np.zeros((self.num_classes, self.num_slots))
        for i in range(self.num_classes):
            a[i, i * self.per_class_slots:(i + 1) * self.per_class_slots] = 1.0 / self.per_class_slots
        return a


def semantic_summary(mem: PrototypeMemory) -> Tensor:
    """C×D matrix whose row i is the mean of class i's block of memory rows."""
    return matmul(Tensor(mem.averaging_matrix()), mem.m.tensor)


def address(query: Tensor, keys: Tensor, temperature: float) -> Tensor:
    """Softmax over keys of cosine(query, key) / temperature, one row per query."""
    return row_softmax(scale(cosine_rows(query, keys), 1.0 / temperature))


def read_instance(f_ins: Tensor, mem: PrototypeMemory) -> tuple[Tensor, Tensor]:
    """Return (addressing weights P×N, retrieved features P×D)."""
    if f_ins.shape[1] != mem.dim:
        raise UsageError(f"read_instance: query width {f_ins.shape[1]} != memory width {mem.dim}")
    w = address(f_ins, mem.m.tensor, mem.temperature)
    return w, matmul(w, mem.m.tensor)


def read_semantic(f_seg: Tensor, summary: Tensor, temperature: float = 0.1) -> tuple[Tensor, Tensor]:
    """Return (class-similarity weights P×C, retrieved features P×D)."""
    if f_seg.shape[1] != summary.shape[1]:
        raise UsageError(f"read_semantic: query width {f_seg.shape[1]} != summary width {summary.shape[1]}")
    alpha = address(f_seg, summary, temperature)
    return alpha, matmul(alpha, summary)


def write_weight_ply(path, xyz: np.ndarray, weights: np.ndarray) -> None:
    """ASCII PLY with one grayscale vertex color per point plus the raw weight."""
    xyz = np.asarray(xyz, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    gray = np.clip(np.round(weights * 255), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(xyz)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("property double weight\nend_header\n")
        for (x, y, z), g, w in zip(xyz, gray, weights):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {g} {g} {g} {float(w)!r}\n")


def read_weight_ply(path) -> np.ndarray:
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = lines[lines.index("end_header") + 1:]
    return np.array([float(line.split()[-1]) for line in body])
