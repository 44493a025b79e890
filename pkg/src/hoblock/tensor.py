"""Dense 5-D tensors, offset grids, padding helpers and the HOT1 file format.

Tensors are plain ``numpy.ndarray`` objects with exactly five axes laid out as
``(batch, channel, time, height, width)`` in C (row-major) order.
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_HOT1_MAGIC = b"HOT1"
_HOT1_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HOT1_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """A configuration violates a structural constraint."""


class FormatError(ValueError):
    """A file does not follow the expected on-disk format."""


def resolve_dtype(mode: str | np.dtype | type) -> np.dtype:
    if isinstance(mode, str) and mode in DTYPES:
        return np.dtype(DTYPES[mode])
    dt = np.dtype(mode)
    if dt not in _HOT1_TAGS:
        raise ValueError(f"unsupported dtype {mode!r}; use 'f32' or 'f64'")
    return dt


def as_tensor5(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x, dtype=dtype)
    if arr.ndim != 5:
        raise ShapeError(f"expected a 5-D tensor (n, c, t, h, w), got shape {arr.shape}")
    return arr


def tensor5(shape: Sequence[int], data: Sequence[float], dtype="f64") -> np.ndarray:
    """Build a tensor from a shape and a flat row-major buffer."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 5:
        raise ShapeError(f"shape must have 5 entries, got {shape}")
    buf = np.asarray(data, dtype=resolve_dtype(dtype))
    if buf.size != int(np.prod(shape)):
        raise ShapeError(f"data length {buf.size} does not match shape {shape}")
    return buf.reshape(shape)


def index(x: np.ndarray, n: int, c: int, t: int, h: int, w: int) -> float:
    x = as_tensor5(x)
    idx = (n, c, t, h, w)
    for i, size in zip(idx, x.shape):
        if not 0 <= i < size:
            raise IndexError(f"index {idx} out of bounds for shape {x.shape}")
    N, C, T, H, W = x.shape
    return x.reshape(-1)[(((n * C + c) * T + t) * H + h) * W + w]


@dataclass(frozen=True)
class OffsetGrid:
    """Full cartesian grid of integer ``(dt, dh, dw)`` offsets with the given half-widths."""

    extents: tuple[int, int, int]

    def __post_init__(self):
        ext = tuple(int(k) for k in self.extents)
        if len(ext) != 3 or min(ext) < 0:
            raise ValueError(f"extents must be three non-negative integers, got {self.extents}")
        object.__setattr__(self, "extents", ext)

    @classmethod
    def from_shape(cls, shape: Sequence[int] | str) -> "OffsetGrid":
        """Grid from a kernel shape such as ``(3, 3, 3)`` or ``"1x3x3"``."""
        if isinstance(shape, str):
            shape = [int(s) for s in shape.lower().replace("×", "x").split("x")]
        if len(shape) != 3 or any(s < 1 or s % 2 == 0 for s in shape):
            raise ValueError(f"kernel shape must be three odd positive sizes, got {shape}")
        return cls(tuple((s - 1) // 2 for s in shape))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(2 * k + 1 for k in self.extents)

    @property
    def offsets(self) -> list[tuple[int, int, int]]:
        kt, kh, kw = self.extents
        return list(itertools.product(range(-kt, kt + 1), range(-kh, kh + 1), range(-kw, kw + 1)))

    def __len__(self) -> int:
        st, sh, sw = self.shape
        return st * sh * sw

    def __str__(self) -> str:
        return "x".join(str(s) for s in self.shape)

    def covers(self, other: "OffsetGrid") -> bool:
        return all(a >= b for a, b in zip(self.extents, other.extents))


def out_size(size: int, stride: int) -> int:
    """'Same' output length: ceil(size / stride)."""
    return -(-size // stride)


def same_pads(size: int, extent: int, stride: int) -> tuple[int, int]:
    """(before, after) padding so that output ``o`` reads input ``stride*o + d``, |d| <= extent."""
    n_out = out_size(size, stride)
    after = max((n_out - 1) * stride + extent + 1 - size, 0)
    return extent, after


def pad_same(x: np.ndarray, extents, strides=(1, 1, 1), value=0.0) -> np.ndarray:
    pads = [(0, 0), (0, 0)] + [same_pads(s, k, st) for s, k, st in zip(x.shape[2:], extents, strides)]
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, pads, constant_values=value)


def padded_gather(x: np.ndarray, n: int, c: int, p: tuple[int, int, int], grid: OffsetGrid) -> list[float]:
    """Values ``x[n, c, p + q]`` for every offset ``q`` of ``grid``; out-of-volume reads give 0."""
    x = as_tensor5(x)
    _, _, T, H, W = x.shape
    t, h, w = p
    if not (0 <= t < T and 0 <= h < H and 0 <= w < W):
        raise IndexError(f"position {p} outside volume {(T, H, W)}")
    out = []
    for dt, dh, dw in grid.offsets:
        tt, hh, ww = t + dt, h + dh, w + dw
        if 0 <= tt < T and 0 <= hh < H and 0 <= ww < W:
            out.append(float(x[n, c, tt, hh, ww]))
        else:
            out.append(0.0)
    return out


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = as_tensor5(a), as_tensor5(b)
    _check_same(a, b)
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = as_tensor5(a), as_tensor5(b)
    _check_same(a, b)
    return a * b


def scale(a, s: float) -> np.ndarray:
    a = as_tensor5(a)
    return a * a.dtype.type(s)


def map_(a, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    a = as_tensor5(a)
    out = np.asarray(fn(a), dtype=a.dtype)
    _check_same(a, out)
    return out


# -- HOT1 ------------------------------------------------------------------


def write_hot1(path, x: np.ndarray) -> None:
    x = as_tensor5(x)
    tag = _HOT1_TAGS.get(x.dtype)
    if tag is None:
        raise ValueError(f"HOT1 stores f32 or f64 only, got {x.dtype}")
    header = _HOT1_MAGIC + struct.pack("<5IB", *x.shape, tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(x, dtype=_HOT1_DTYPES[tag]).tobytes())


def read_hot1(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 25 or raw[:4] != _HOT1_MAGIC:
        raise FormatError(f"{path}: not a HOT1 file (bad magic or truncated header)")
    *shape, tag = struct.unpack("<5IB", raw[4:25])
    if tag not in _HOT1_DTYPES:
        raise FormatError(f"{path}: unknown dtype tag {tag}")
    dt = _HOT1_DTYPES[tag]
    count = int(np.prod(shape))
    if len(raw) - 25 != count * dt.itemsize:
        raise FormatError(f"{path}: payload size does not match header shape {tuple(shape)}")
    return np.frombuffer(raw, dtype=dt, offset=25).astype(dt.newbyteorder("="), copy=True).reshape(shape)


def iter_positions(shape) -> Iterator[tuple[int, int, int]]:
    return itertools.product(*(range(s) for s in shape))
