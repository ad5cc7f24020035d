"""Synthetic indoor rooms with semantic and instance labels, sliding-window
blockification, and the MPNC binary scene format."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import UsageError

log = logging.getLogger(__name__)

CLASS_NAMES = ("floor", "ceiling", "wall", "table", "chair", "clutter")
FLOOR, CEILING, WALL, TABLE, CHAIR, CLUTTER = range(6)
PLANE_CLASSES = (FLOOR, CEILING, WALL)

BASE_COLORS = np.array([
    [0.50, 0.45, 0.40],
    [0.90, 0.90, 0.88],
    [0.78, 0.76, 0.68],
    [0.55, 0.35, 0.18],
    [0.25, 0.32, 0.60],
    [0.60, 0.30, 0.30],
])


@dataclass
class Scene:
    points: np.ndarray  # P×6 float32: x y z r g b
    semantic: np.ndarray
    instance: np.ndarray
    num_classes: int = 6
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float32)
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)

    @property
    def num_points(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3].astype(np.float64)

    @property
    def extent(self) -> np.ndarray:
        return self.points[:, :3].max(axis=0).astype(np.float64)

    @property
    def rare(self) -> bool:
        return bool(self.metadata.get("rare", False))


@dataclass
class GeneratorConfig:
    num_classes: int = 6
    density_weights: tuple = (1.0, 1.0, 1.0, 1.2, 1.5, 1.2)
    rare_pattern_rate: float = 0.1
    points_per_scene: int = 20000
    seed: int = 0
    room_size: tuple = (2.0, 3.0)
    room_height: tuple = (2.6, 3.0)
    tables: tuple = (1, 2)
    chairs: tuple = (2, 4)
    clutter: tuple = (1, 3)
    coord_noise: float = 0.005
    force_rare: bool = False

    def __post_init__(self):
        if self.num_classes != len(CLASS_NAMES):
            raise ValueError(f"the generator knows {len(CLASS_NAMES)} classes")
        if len(self.density_weights) != self.num_classes or min(self.density_weights) <= 0:
            raise ValueError("density weights must be positive, one per class")
        if not 0 <= self.rare_pattern_rate <= 1:
            raise ValueError("rare_pattern_rate must lie in [0, 1]")
        if self.points_per_scene <= 0:
            raise ValueError("points_per_scene must be positive")


@dataclass
class _Part:
    cls: int
    boxes: list  # list of (lo, hi) arrays; a zero-thickness box is a rectangle
    color: np.ndarray


def _box(lo, hi):
    return np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)


def _faces(lo, hi):
    """The (up to six) axis-aligned faces of a box as (lo, hi) rectangles, bottom face omitted."""
    size = hi - lo
    if (size == 0).any():
        return [(lo, hi)]
    out = []
    for axis in range(3):
        for side in (0, 1):
            if axis == 2 and side == 0:
                continue
            flo, fhi = lo.copy(), hi.copy()
            v = hi[axis] if side else lo[axis]
            flo[axis] = fhi[axis] = v
            out.append((flo, fhi))
    return out


def _area(lo, hi):
    s = np.sort(hi - lo)
    return s[1] * s[2]


def _sample_part(part: _Part, n: int, rng: np.random.Generator) -> np.ndarray:
    faces = [f for b in part.boxes for f in _faces(*b)]
    areas = np.array([_area(*f) for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    lo = np.array([faces[i][0] for i in which])
    hi = np.array([faces[i][1] for i in which])
    return lo + rng.uniform(size=(n, 3)) * (hi - lo)


def _part_area(part: _Part) -> float:
    return sum(_area(*f) for b in part.boxes for f in _faces(*b))


def _chair(x0, y0, facing, rng, z0=0.0):
    """Seat, four legs and a backrest inside a square footprint at (x0, y0)."""
    w = rng.uniform(0.40, 0.50)
    h = rng.uniform(0.42, 0.48)
    t, leg = 0.05, 0.04
    back_h = rng.uniform(0.40, 0.50)
    local = [
        _box([0, 0, h - t], [w, w, h]),
        _box([0, 0, 0], [leg, leg, h - t]),
        _box([w - leg, 0, 0], [w, leg, h - t]),
        _box([0, w - leg, 0], [leg, w, h - t]),
        _box([w - leg, w - leg, 0], [w, w, h - t]),
        _box([0, 0, h], [w, 0.05, h + back_h]),
    ]
    boxes = []
    for lo, hi in local:
        corners = np.array([lo, hi])
        xy = corners[:, :2] - w / 2
        for _ in range(facing):
            xy = np.column_stack([-xy[:, 1], xy[:, 0]])
        xy = xy + w / 2
        nlo = np.array([xy[:, 0].min(), xy[:, 1].min(), lo[2]])
        nhi = np.array([xy[:, 0].max(), xy[:, 1].max(), hi[2]])
        boxes.append(_box(nlo + [x0, y0, z0], nhi + [x0, y0, z0]))
    return boxes, w, h


def _overlaps(rect, rects, gap=0.05):
    x0, y0, x1, y1 = rect
    return any(x0 < b[2] + gap and b[0] < x1 + gap and y0 < b[3] + gap and b[1] < y1 + gap for b in rects)


def _place(size_x, size_y, room, rects, rng, attempts=100):
    for _ in range(attempts):
        x = rng.uniform(0.1, room[0] - size_x - 0.1)
        y = rng.uniform(0.1, room[1] - size_y - 0.1)
        rect = (x, y, x + size_x, y + size_y)
        if not _overlaps(rect, rects):
            rects.append(rect)
            return x, y
    return None


def generate_scene(cfg: GeneratorConfig) -> Scene:
    """Sample a rectangular room with planes, tables, chairs and clutter.

    Fully determined by ``cfg`` (including ``cfg.seed``). With probability
    ``rare_pattern_rate`` one rare configuration is added: two chairs stacked
    on top of each other, or two chairs standing back to back.
    """
    rng = np.random.default_rng(cfg.seed)
    room = np.array([rng.uniform(*cfg.room_size), rng.uniform(*cfg.room_size), rng.uniform(*cfg.room_height)])
    lx, ly, lz = room

    def jitter(cls, amount=0.06):
        return np.clip(BASE_COLORS[cls] + rng.normal(0, amount, 3), 0, 1)

    parts = [
        _Part(FLOOR, [_box([0, 0, 0], [lx, ly, 0])], jitter(FLOOR)),
        _Part(CEILING, [_box([0, 0, lz], [lx, ly, lz])], jitter(CEILING)),
        _Part(WALL, [_box([0, 0, 0], [lx, 0, lz])], jitter(WALL)),
        _Part(WALL, [_box([0, ly, 0], [lx, ly, lz])], jitter(WALL)),
        _Part(WALL, [_box([0, 0, 0], [0, ly, lz])], jitter(WALL)),
        _Part(WALL, [_box([lx, 0, 0], [lx, ly, lz])], jitter(WALL)),
    ]
    rects: list = []
    dropped = 0
    metadata = {"rare": False, "pattern": "none"}

    rare = cfg.force_rare or rng.uniform() < cfg.rare_pattern_rate
    if rare:
        stacked = rng.uniform() < 0.5
        if stacked:
            spot = _place(0.5, 0.5, room, rects, rng)
            if spot is not None:
                facing = int(rng.integers(4))
                lower, w, h = _chair(spot[0], spot[1], facing, rng)
                upper, _, _ = _chair(spot[0], spot[1], facing, rng, z0=h + 0.005)
                parts.append(_Part(CHAIR, lower, jitter(CHAIR, 0.12)))
                parts.append(_Part(CHAIR, upper, jitter(CHAIR, 0.12)))
                metadata = {"rare": True, "pattern": "stacked_chairs"}
        else:
            spot = _place(0.5, 1.02, room, rects, rng)
            if spot is not None:
                a, _, _ = _chair(spot[0], spot[1], 2, rng)  # backrest toward +y
                b, _, _ = _chair(spot[0], spot[1] + 0.52, 0, rng)  # backrest toward -y
                parts.append(_Part(CHAIR, a, jitter(CHAIR, 0.12)))
                parts.append(_Part(CHAIR, b, jitter(CHAIR, 0.12)))
                metadata = {"rare": True, "pattern": "back_to_back_chairs"}
        if not metadata["rare"]:
            dropped += 1

    for _ in range(int(rng.integers(cfg.tables[0], cfg.tables[1] + 1))):
        a, b = rng.uniform(0.8, 1.2), rng.uniform(0.5, 0.8)
        spot = _place(a, b, room, rects, rng)
        if spot is None:
            dropped += 1
            continue
        x, y = spot
        top = rng.uniform(0.70, 0.76)
        leg = 0.05
        boxes = [_box([x, y, top - 0.05], [x + a, y + b, top])]
        for cx, cy in ((x, y), (x + a - leg, y), (x, y + b - leg), (x + a - leg, y + b - leg)):
            boxes.append(_box([cx, cy, 0], [cx + leg, cy + leg, top - 0.05]))
        parts.append(_Part(TABLE, boxes, jitter(TABLE, 0.10)))
        if rng.uniform() < 0.5:
            s, hgt = rng.uniform(0.15, 0.3), rng.uniform(0.1, 0.3)
            cx, cy = x + rng.uniform(0, a - s), y + rng.uniform(0, b - s)
            parts.append(_Part(CLUTTER, [_box([cx, cy, top], [cx + s, cy + s, top + hgt])], jitter(CLUTTER, 0.15)))

    for _ in range(int(rng.integers(cfg.chairs[0], cfg.chairs[1] + 1))):
        spot = _place(0.5, 0.5, room, rects, rng)
        if spot is None:
            dropped += 1
            continue
        boxes, _, _ = _chair(spot[0], spot[1], int(rng.integers(4)), rng)
        parts.append(_Part(CHAIR, boxes, jitter(CHAIR, 0.12)))

    for _ in range(int(rng.integers(cfg.clutter[0], cfg.clutter[1] + 1))):
        s, hgt = rng.uniform(0.15, 0.35), rng.uniform(0.1, 0.4)
        spot = _place(s, s, room, rects, rng)
        if spot is None:
            dropped += 1
            continue
        box = _box([spot[0], spot[1], 0], [spot[0] + s, spot[1] + s, hgt])
        parts.append(_Part(CLUTTER, [box], jitter(CLUTTER, 0.15)))

    if dropped:
        log.info("scene seed %d: %d objects could not be placed", cfg.seed, dropped)

    weights = np.array([_part_area(p) * cfg.density_weights[p.cls] for p in parts])
    counts = _allocate(cfg.points_per_scene, weights, minimum=30)
    xyz, rgb, sem, ins = [], [], [], []
    for inst, (part, n) in enumerate(zip(parts, counts)):
        pts = _sample_part(part, n, rng)
        xyz.append(pts)
        rgb.append(np.clip(part.color + rng.normal(0, 0.03, (n, 3)), 0, 1))
        sem.append(np.full(n, part.cls))
        ins.append(np.full(n, inst))
    xyz = np.concatenate(xyz)
    xyz = np.clip(xyz + rng.normal(0, cfg.coord_noise, xyz.shape), 0, room)
    points = np.column_stack([xyz, np.concatenate(rgb)])
    metadata["dropped_objects"] = dropped
    return Scene(points, np.concatenate(sem), np.concatenate(ins), cfg.num_classes, metadata)


def _allocate(total: int, weights: np.ndarray, minimum: int) -> np.ndarray:
    """Integer counts proportional to weights (largest remainder), each at least ``minimum``."""
    base = np.full(len(weights), minimum)
    rest = total - base.sum()
    if rest < 0:
        raise ValueError("points_per_scene too small for the number of parts")
    share = weights / weights.sum() * rest
    counts = np.floor(share).astype(int)
    left = rest - counts.sum()
    counts[np.argsort(-(share - counts), kind="stable")[:left]] += 1
    return base + counts


# --------------------------------------------------------------------------
# blocks


@dataclass
class BlockSpec:
    block_size: float = 1.0
    stride: float = 0.5
    samples_per_block: int = 4096
    min_points: int = 100

    def __post_init__(self):
        if self.stride > self.block_size:
            raise ValueError("stride must not exceed block_size")
        if self.samples_per_block <= 0:
            raise ValueError("samples_per_block must be positive")


@dataclass
class Block:
    origin: tuple[float, float]
    grid_pos: tuple[int, int]
    indices: np.ndarray  # rows of the scene, possibly repeated when padded
    features: np.ndarray  # P×K network input

    @property
    def count(self) -> int:
        return len(self.indices)


def block_offsets(length: float, spec: BlockSpec) -> np.ndarray:
    """Window starts along one axis: every stride step that begins inside the room."""
    n = max(int(np.ceil(length / spec.stride - 1e-9)), 1)
    return np.arange(n) * spec.stride


def block_features(scene: Scene, idx: np.ndarray, low, room_xyz: bool = False) -> np.ndarray:
    """Block-local xyz (shifted by the window's minimum corner), rgb, and optionally room-normalized xyz."""
    xyz = scene.xyz[idx]
    local = xyz - np.asarray(low, dtype=np.float64)
    feats = [local, scene.points[idx, 3:6].astype(np.float64)]
    if room_xyz:
        feats.append(xyz / np.maximum(scene.extent, 1e-9))
    return np.column_stack(feats)


def blockify(scene: Scene, spec: BlockSpec | None = None, seed: int = 0, full: bool = False,
             room_xyz: bool = False) -> list[Block]:
    """Cut the room into overlapping square windows over the floor plane.

    Windows holding fewer than ``spec.min_points`` points are skipped. With
    ``full`` every point of the window is kept in scene order (used at
    inference); otherwise exactly ``samples_per_block`` points are drawn: a
    subset without replacement when the window has enough points, or all of
    them plus uniform draws with replacement to pad it up.
    """
    spec = spec or BlockSpec()
    if scene.num_points == 0:
        raise UsageError("blockify: empty scene")
    rng = np.random.default_rng(seed)
    xyz = scene.xyz
    ext = scene.extent
    xs, ys = block_offsets(ext[0], spec), block_offsets(ext[1], spec)
    blocks = []
    for j, oy in enumerate(ys):
        for i, ox in enumerate(xs):
            inside = np.flatnonzero((xyz[:, 0] >= ox) & (xyz[:, 0] < ox + spec.block_size)
                                    & (xyz[:, 1] >= oy) & (xyz[:, 1] < oy + spec.block_size))
            if len(inside) < spec.min_points:
                continue
            if full:
                idx = inside
            elif len(inside) >= spec.samples_per_block:
                idx = rng.choice(inside, size=spec.samples_per_block, replace=False)
            else:
                extra = rng.choice(inside, size=spec.samples_per_block - len(inside), replace=True)
                idx = rng.permutation(np.concatenate([inside, extra]))
            low = xyz[inside].min(axis=0)
            blocks.append(Block((float(ox), float(oy)), (i, j), idx, block_features(scene, idx, low, room_xyz)))
    return blocks


# --------------------------------------------------------------------------
# MPNC format

MAGIC = b"MPNC"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class FormatError(ValueError):
    pass


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def encode_scene(scene: Scene) -> bytes:
    if scene.num_points == 0:
        raise UsageError("refusing to write an empty scene")
    p = scene.num_points
    head = _HEADER.pack(MAGIC, VERSION, p, scene.num_classes)
    return b"".join([
        head,
        scene.points.astype("<f4").tobytes(),
        scene.semantic.astype("<u2").tobytes(),
        scene.instance.astype("<u4").tobytes(),
    ])


def decode_scene(buf: bytes) -> Scene:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("header truncated")
    _, version, p, c = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"unsupported MPNC version {version}")
    need = _HEADER.size + p * (6 * 4 + 2 + 4)
    if len(buf) < need:
        raise TruncatedError(f"payload truncated: {len(buf)} bytes, need {need}")
    off = _HEADER.size
    pts = np.frombuffer(buf, "<f4", 6 * p, off).reshape(p, 6)
    off += 24 * p
    sem = np.frombuffer(buf, "<u2", p, off)
    off += 2 * p
    ins = np.frombuffer(buf, "<u4", p, off)
    return Scene(pts.astype(np.float32), sem.astype(np.int64), ins.astype(np.int64), int(c))


def write_scene(scene: Scene, path) -> None:
    data = encode_scene(scene)
    with open(path, "wb") as fh:
        fh.write(data)


def read_scene(path) -> Scene:
    with open(path, "rb") as fh:
        return decode_scene(fh.read())


def write_ply(scene: Scene, path) -> None:
    """ASCII PLY with x y z r g b sem ins vertex properties."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {scene.num_points}\n")
        for name in ("x", "y", "z"):
            fh.write(f"property float {name}\n")
        for name in ("red", "green", "blue"):
            fh.write(f"property uchar {name}\n")
        fh.write("property int sem\nproperty int ins\nend_header\n")
        rgb = np.clip(np.round(scene.points[:, 3:6] * 255), 0, 255).astype(int)
        for (x, y, z), c, s, i in zip(scene.points[:, :3], rgb, scene.semantic, scene.instance):
            fh.write(f"{x:.6f} {y:.6f} {z:.6f} {c[0]} {c[1]} {c[2]} {s} {i}\n")
