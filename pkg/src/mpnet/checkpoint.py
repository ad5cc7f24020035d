"""Little-endian tagged parameter blocks.

Layout: magic ``MPCK``, version u32, step u64, epoch u32, 32-byte config
digest, tensor count u32; then per tensor: name length u16, utf-8 name,
rows u32, cols u32, per-parameter optimizer step u64, and rows*cols f64 values
followed by the Adam first and second moments of the same shape.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Parameter
from .scenes import FormatError, MagicError, TruncatedError, VersionError

log = logging.getLogger(__name__)

MAGIC = b"MPCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQI32sI")
_TENSOR = struct.Struct("<IIQ")


@dataclass
class Checkpoint:
    params: dict[str, Parameter]
    step: int
    epoch: int
    config_hash: bytes


def save_checkpoint(path, params: dict[str, Parameter], step: int, epoch: int, config_hash: bytes) -> None:
    chunks = [_HEAD.pack(MAGIC, VERSION, step, epoch, config_hash, len(params))]
    for name in sorted(params):
        p = params[name]
        raw = name.encode()
        rows, cols = p.shape
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(_TENSOR.pack(rows, cols, p.step_count))
        for arr in (p.data, p.m, p.v):
            chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise MagicError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < _HEAD.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, step, epoch, digest, count = _HEAD.unpack_from(buf)
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if expected_hash is not None and digest != expected_hash:
        log.warning("%s: config hash differs from the current configuration", path)
    off = _HEAD.size
    params = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode()
            off += n
            rows, cols, steps = _TENSOR.unpack_from(buf, off)
            off += _TENSOR.size
            arrays = []
            for _ in range(3):
                size = rows * cols * 8
                if off + size > len(buf):
                    raise TruncatedError(f"{path}: tensor {name} truncated")
                arrays.append(np.frombuffer(buf, "<f8", rows * cols, off).reshape(rows, cols).astype(np.float64))
                off += size
            p = Parameter.of(arrays[0], name=name)
            p.m, p.v, p.step_count = arrays[1], arrays[2], steps
            params[name] = p
    except struct.error as exc:
        raise TruncatedError(f"{path}: {exc}") from None
    return Checkpoint(params, step, epoch, digest)


def restore_into(target: dict[str, Parameter], ckpt: Checkpoint) -> None:
    """Copy checkpoint values and optimizer state into an existing parameter set."""
    if set(target) != set(ckpt.params):
        missing = sorted(set(target) ^ set(ckpt.params))
        raise FormatError(f"checkpoint parameters do not match the model: {missing}")
    for name, p in target.items():
        src = ckpt.params[name]
        if p.shape != src.shape:
            raise FormatError(f"{name}: shape {src.shape} in checkpoint, model expects {p.shape}")
        p.tensor.data[...] = src.data
        p.m[...] = src.m
        p.v[...] = src.v
        p.step_count = src.step_count
