"""Dense 2-D tensors with reverse-mode gradients, an Adam optimizer and a
finite-difference gradient checker.

Every operation records a closure on its output tensor; ``backward`` walks the
record in reverse topological order. All arrays are float64.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)

EPS_NORM = 1e-12
DTYPE = np.float64


class DimensionError(ValueError):
    pass


class Tensor:
    """A 2-D float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None):
        """Propagate gradients from this tensor to every recorded ancestor."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=DTYPE)
        }
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar for the few elementwise ops used in loss code
    def __add__(self, other):
        return add(self, _wrap(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self.shape))

    def __rsub__(self, other):
        return sub(_wrap(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Skip recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check(cond: bool, op: str, *shapes):
    if not cond:
        raise DimensionError(f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes))


# --------------------------------------------------------------------------
# listed operations


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    _check(x.shape[1] == w.shape[0] and b.shape == (1, w.shape[1]), "affine", x.shape, w.shape, b.shape)
    xd, wd = x.data, w.data

    def backward(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0, keepdims=True)

    return _make(xd @ wd + b.data, (x, w, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward)


def row_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, (x,), backward)


def cosine_rows(a: Tensor, b: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` (P×D) and ``b`` (N×D)."""
    _check(a.shape[1] == b.shape[1], "cosine_rows", a.shape, b.shape)
    na_raw = np.linalg.norm(a.data, axis=1, keepdims=True)
    nb_raw = np.linalg.norm(b.data, axis=1, keepdims=True)
    if (na_raw < eps).any() or (nb_raw < eps).any():
        logger.warning("cosine_rows: clamping near-zero row norm to %g", eps)
    na = np.maximum(na_raw, eps)
    nb = np.maximum(nb_raw, eps)
    ua, ub = a.data / na, b.data / nb
    out = ua @ ub.T
    clamped_a = na_raw < eps
    clamped_b = nb_raw < eps

    def backward(g):
        # d cos / d a_i = (ub_j - cos_ij * ua_i) / |a_i|, zero projection when clamped
        ga = g @ ub - (g * out).sum(axis=1, keepdims=True) * np.where(clamped_a, 0.0, ua)
        gb = g.T @ ua - (g * out).sum(axis=0)[:, None] * np.where(clamped_b, 0.0, ub)
        return ga / na, gb / nb

    return _make(out, (a, b), backward)


# --------------------------------------------------------------------------
# supporting primitives; everything else is composed from these


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _make(ad @ bd, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "add", a.shape, b.shape)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, "sub", a.shape, b.shape)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also be a P×1 column broadcast across columns."""
    ad, bd = a.data, b.data
    if a.shape == b.shape:
        return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))
    _check(b.shape == (a.shape[0], 1), "mul", a.shape, b.shape)
    return _make(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum(axis=1, keepdims=True)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _make(a.data + c, (a,), lambda g: (g,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def power(a: Tensor, gamma: float) -> Tensor:
    """max(a, 0) ** gamma for gamma >= 1 (used for the focal weight)."""
    if gamma < 1:
        raise ValueError("power: gamma must be >= 1 to stay differentiable at 0")
    base = np.maximum(a.data, 0.0)
    return _make(base ** gamma, (a,), lambda g: (g * gamma * base ** (gamma - 1),))


def log(a: Tensor, floor: float = 1e-12) -> Tensor:
    clipped = np.maximum(a.data, floor)
    live = a.data >= floor
    return _make(np.log(clipped), (a,), lambda g: (np.where(live, g / clipped, 0.0),))


def divide(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / b for equal shapes, or a (P×D) / b (P×1)."""
    ad, bd = a.data, b.data
    out = ad / bd
    if a.shape == b.shape:
        return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))
    _check(b.shape == (a.shape[0], 1), "divide", a.shape, b.shape)
    return _make(out, (a, b), lambda g: (g / bd, -(g * out).sum(axis=1, keepdims=True) / bd))


def row_norm(a: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Euclidean norm of each row (P×1); gradient is zero where the norm is below eps."""
    n = np.linalg.norm(a.data, axis=1, keepdims=True)
    safe = np.maximum(n, eps)
    live = n >= eps
    return _make(n, (a,), lambda g: (np.where(live, g / safe, 0.0) * a.data,))


def pairwise_distance(a: Tensor, b: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Euclidean distance between every row of a (P×D) and b (N×D)."""
    _check(a.shape[1] == b.shape[1], "pairwise_distance", a.shape, b.shape)
    diff = a.data[:, None, :] - b.data[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    safe = np.maximum(d, eps)
    live = d >= eps

    def backward(g):
        coef = np.where(live, g / safe, 0.0)[:, :, None] * diff
        return coef.sum(axis=1), -coef.sum(axis=0)

    return _make(d, (a, b), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].shape[0]
    _check(all(p.shape[0] == rows for p in parts), "concat_cols", *[p.shape for p in parts])
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """out[i] = a[index[i]]; backward scatter-adds into a."""
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]

    def backward(g):
        return (_segment_sum(g, index, n),)

    return _make(a.data[index], (a,), backward)


def pick(a: Tensor, cols: np.ndarray) -> Tensor:
    """out[i, 0] = a[i, cols[i]] as a P×1 column."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def backward(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g[:, 0]
        return (full,)

    return _make(a.data[rows, cols][:, None], (a,), backward)


def _segment_sum(x: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    agg = sparse.csr_matrix((np.ones(len(seg)), (seg, np.arange(len(seg)))), shape=(n, len(seg)))
    return np.asarray(agg @ x)


def segment_mean(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Mean of rows sharing a segment id; every id in [0, n) must occur."""
    seg = np.asarray(seg, dtype=np.int64)
    counts = np.bincount(seg, minlength=n).astype(DTYPE)[:, None]
    if (counts == 0).any():
        raise ValueError("segment_mean: empty segment")
    out = _segment_sum(a.data, seg, n) / counts

    def backward(g):
        return ((g / counts)[seg],)

    return _make(out, (a,), backward)


def segment_max(a: Tensor, seg: np.ndarray, n: int) -> Tensor:
    """Columnwise max of rows sharing a segment id; gradient routed to the first argmax."""
    seg = np.asarray(seg, dtype=np.int64)
    order = np.lexsort((np.arange(len(seg)), seg))
    sorted_seg = seg[order]
    starts = np.flatnonzero(np.r_[True, sorted_seg[1:] != sorted_seg[:-1]])
    if len(starts) != n:
        raise ValueError("segment_max: every segment id must occur")
    vals = a.data[order]
    out = np.maximum.reduceat(vals, starts, axis=0)
    # first row (in input order) attaining the max, per segment and column
    hit = vals == out[sorted_seg]
    pos = np.where(hit, np.arange(len(seg))[:, None], len(seg))
    first = np.minimum.reduceat(pos, starts, axis=0)
    src = order[first]
    cols = np.arange(a.shape[1])

    def backward(g):
        full = np.zeros_like(a.data)
        full[src, cols[None, :]] += g
        return (full,)

    return _make(out, (a,), backward)


def total_sum(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,), lambda g: (np.full_like(a.data, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,), lambda g: (np.full_like(a.data, g[0, 0] / n),))


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar Σ a * weights with constant weights of a's shape."""
    w = np.asarray(weights, dtype=DTYPE).reshape(a.shape)
    return _make(np.array([[(a.data * w).sum()]]), (a,), lambda g: (g[0, 0] * w,))


def row_sum(a: Tensor) -> Tensor:
    return _make(a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, a.shape[1], axis=1),))


# --------------------------------------------------------------------------
# parameters and optimisation


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_every: int = 300_000
    decay_factor: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.decay_every <= 0:
            raise ValueError("decay_every must be positive")

    def rate_at(self, step: int) -> float:
        """Learning rate in effect for the given (1-based) optimizer step."""
        return self.learning_rate * self.decay_factor ** ((step - 1) // self.decay_every)


@dataclass(eq=False)
class Parameter:
    tensor: Tensor
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.tensor.requires_grad = True
        if self.m is None:
            self.m = np.zeros_like(self.tensor.data)
        if self.v is None:
            self.v = np.zeros_like(self.tensor.data)

    @classmethod
    def of(cls, values, name: str = "") -> "Parameter":
        return cls(Tensor(np.array(values, dtype=DTYPE), requires_grad=True, name=name))

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self):
        return self.tensor.shape


class UsageError(RuntimeError):
    pass


def adam_step(p: Parameter, config: OptimizerConfig) -> None:
    """One bias-corrected Adam update in place; clears the gradient."""
    g = p.tensor.grad
    if g is None:
        raise UsageError(f"adam_step: parameter {p.tensor.name or '?'} has no gradient")
    p.step_count += 1
    t = p.step_count
    p.m *= config.beta1
    p.m += (1 - config.beta1) * g
    p.v *= config.beta2
    p.v += (1 - config.beta2) * g * g
    m_hat = p.m / (1 - config.beta1 ** t)
    v_hat = p.v / (1 - config.beta2 ** t)
    p.tensor.data -= config.rate_at(t) * m_hat / (np.sqrt(v_hat) + config.epsilon)
    p.tensor.grad = None


# --------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    skipped_kinks: int = 0
    worst: str = ""
    message: str = ""


def _rel_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central(loss_fn, flat: np.ndarray, k: int, step: float) -> float:
    orig = flat[k]
    flat[k] = orig + step
    fp = loss_fn().item()
    flat[k] = orig - step
    fm = loss_fn().item()
    flat[k] = orig
    return (fp - fm) / (2 * step)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    skip_kinks: bool = False,
    abs_floor: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the computation from the current parameter values
    on every call. With ``max_per_param`` set, only that many randomly chosen
    coordinates of each parameter are probed.

    With ``skip_kinks``, a coordinate that disagrees is probed again with steps
    of h/10 and h/100. If a shorter step agrees with the analytic value, the
    original step straddled a non-differentiable point (a ReLU, max or hinge
    corner) and the coordinate is counted in ``skipped_kinks`` rather than
    failed. A wrong gradient of a smooth function disagrees at every step.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, abs_floor);
    the floor keeps round-off in near-zero gradients from reading as failure.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.tensor.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.item()):
        return GradCheckReport(np.inf, False, 0, message=f"non-finite loss {loss.item()}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.tensor.grad = None

    worst, worst_where, checked, kinks = 0.0, "", 0, 0
    for pi, p in enumerate(params):
        flat = p.tensor.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            idx = rng.choice(flat.size, size=max_per_param, replace=False)
        for k in idx:
            num = _central(loss_fn, flat, k, h)
            if not np.isfinite(num):
                return GradCheckReport(np.inf, False, checked, kinks, message="non-finite loss under perturbation")
            ana = analytic[pi].reshape(-1)[k]
            rel = _rel_error(ana, num, abs_floor)
            if rel >= tol and skip_kinks:
                shorter = (_central(loss_fn, flat, k, step) for step in (h / 10, h / 100))
                if any(_rel_error(ana, n, abs_floor) < tol for n in shorter):
                    kinks += 1
                    continue
            checked += 1
            if rel > worst:
                worst, worst_where = rel, f"{p.tensor.name or pi}[{k}] analytic={ana:.6g} numeric={num:.6g}"
    for p in params:
        p.tensor.grad = None
    return GradCheckReport(worst, worst < tol, checked, kinks, worst_where)
