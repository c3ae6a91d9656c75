"""Tensor containers, pyramid geometry, layout transforms and the XMSD file format.

Tensors are plain ``numpy.ndarray`` objects (row-major, last axis contiguous).
Only two storage dtypes exist, float32 and IEEE binary16; every computation in
the package widens to float32 first.

Sampling locations are ordered ``(x, y)``: ``x`` runs along the width axis,
``y`` along the height axis, both normalized to ``[0, 1]``.
"""

from __future__ import annotations

import enum
import os
import struct
import sys
from dataclasses import dataclass, field
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import FormatError, ShapeError, SizeError, InputError

MAGIC = b"XMSD"
FORMAT_VERSION = 1
MAX_RANK = 16


class Dtype(enum.IntEnum):
    """Storage dtype; the integer value is the on-disk dtype code."""

    F32 = 0
    F16 = 1

    @property
    def np(self) -> np.dtype:
        return np.dtype(np.float32) if self is Dtype.F32 else np.dtype(np.float16)

    @property
    def itemsize(self) -> int:
        return 4 if self is Dtype.F32 else 2

    @classmethod
    def of(cls, array: np.ndarray) -> "Dtype":
        if array.dtype == np.float32:
            return cls.F32
        if array.dtype == np.float16:
            return cls.F16
        raise InputError(f"unsupported dtype {array.dtype}; expected float32 or float16")

    @classmethod
    def parse(cls, name: Union[str, "Dtype"]) -> "Dtype":
        if isinstance(name, Dtype):
            return name
        try:
            return cls[name.upper()]
        except KeyError:
            raise InputError(f"unknown dtype {name!r}") from None


class Layout(enum.Enum):
    CHANNEL_LAST = "channel_last"
    PIXEL_LAST = "pixel_last"
    PIXEL_LAST_PADDED = "pixel_last_padded"


class Fill(enum.Enum):
    ZEROS = "zeros"
    SEQUENTIAL = "sequential"
    RANDOM = "random"


@dataclass(frozen=True)
class LevelSpec:
    height: int
    width: int
    offset: int

    @property
    def pixels(self) -> int:
        return self.height * self.width

    @property
    def padded_stride(self) -> int:
        return self.width + 1

    @property
    def padded_pixels(self) -> int:
        return self.height * (self.width + 1)


def level_specs(shapes: Sequence[Sequence[int]]) -> tuple[LevelSpec, ...]:
    """Build cumulative-offset level specs from ``(H, W)`` pairs."""
    if len(shapes) == 0:
        raise SizeError("a pyramid needs at least one level")
    levels = []
    offset = 0
    for i, shape in enumerate(shapes):
        h, w = (int(v) for v in shape)
        if h < 1 or w < 1:
            raise SizeError(f"level {i} has non-positive extent ({h}, {w})")
        levels.append(LevelSpec(h, w, offset))
        offset += h * w
    return tuple(levels)


def total_pixels(levels: Sequence[LevelSpec]) -> int:
    return sum(lv.pixels for lv in levels)


def padded_offsets(levels: Sequence[LevelSpec]) -> list[int]:
    """Start of each level along the padded pixel axis."""
    out, acc = [], 0
    for lv in levels:
        out.append(acc)
        acc += lv.padded_pixels
    return out


def total_padded_pixels(levels: Sequence[LevelSpec]) -> int:
    return sum(lv.padded_pixels for lv in levels)


def _check_extents(dims: Sequence[int], itemsize: int) -> None:
    if len(dims) == 0:
        raise SizeError("rank must be at least 1")
    count = 1
    for d in dims:
        if int(d) < 1:
            raise SizeError(f"extent {d} is not positive (dims {list(dims)})")
        count *= int(d)
    if count * itemsize > sys.maxsize:
        raise SizeError(f"dims {list(dims)} overflow the addressable size")


@dataclass(frozen=True)
class FeaturePyramid:
    """Multi-level value tensor.

    ``storage`` shape depends on ``layout``:

    * CHANNEL_LAST: ``(batch, total_pixels, heads, channels)``
    * PIXEL_LAST: ``(batch, heads, channels, total_pixels)``
    * PIXEL_LAST_PADDED: ``(batch, heads, channels, total_padded_pixels)`` where
      every level row has stride ``width + 1`` and the extra column is zero.
    """

    levels: tuple[LevelSpec, ...]
    batch: int
    heads: int
    channels: int
    layout: Layout
    storage: np.ndarray = field(repr=False)

    def __post_init__(self):
        expected = self.expected_shape(self.layout)
        if tuple(self.storage.shape) != expected:
            raise ShapeError(
                f"{self.layout.value} storage has shape {self.storage.shape}, expected {expected}",
                axis="storage",
            )
        Dtype.of(self.storage)

    @property
    def dtype(self) -> Dtype:
        return Dtype.of(self.storage)

    @property
    def total_pixels(self) -> int:
        return total_pixels(self.levels)

    @property
    def level_shapes(self) -> list[tuple[int, int]]:
        return [(lv.height, lv.width) for lv in self.levels]

    def expected_shape(self, layout: Layout) -> tuple[int, ...]:
        if layout is Layout.CHANNEL_LAST:
            return (self.batch, self.total_pixels, self.heads, self.channels)
        if layout is Layout.PIXEL_LAST:
            return (self.batch, self.heads, self.channels, self.total_pixels)
        return (self.batch, self.heads, self.channels, total_padded_pixels(self.levels))

    def with_storage(self, storage: np.ndarray, layout: Layout) -> "FeaturePyramid":
        return FeaturePyramid(self.levels, self.batch, self.heads, self.channels, layout, _frozen(storage))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


def from_array(value: np.ndarray, level_shapes: Sequence[Sequence[int]]) -> FeaturePyramid:
    """Wrap a channel-last ``(batch, pixels, heads, channels)`` array."""
    value = np.asarray(value)
    if value.ndim != 4:
        raise ShapeError(f"value must be rank 4, got shape {value.shape}", axis="value")
    levels = level_specs(level_shapes)
    b, _, h, c = value.shape
    storage = np.array(value, dtype=Dtype.of(value).np, copy=True, order="C")
    return FeaturePyramid(levels, b, h, c, Layout.CHANNEL_LAST, _frozen(storage))


def make_pyramid(
    batch: int,
    heads: int,
    channels: int,
    level_shapes: Sequence[Sequence[int]],
    dtype: Union[Dtype, str] = Dtype.F32,
    fill: Union[Fill, str] = Fill.ZEROS,
    seed: int = 0,
) -> FeaturePyramid:
    """Allocate a channel-last pyramid.

    ``Fill.SEQUENTIAL`` writes ``0, 1, 2, ...`` in storage order.
    ``Fill.RANDOM`` draws uniform ``[-1, 1)`` values from numpy's PCG64
    generator seeded with ``seed``, so content is reproducible per seed.
    """
    dtype = Dtype.parse(dtype)
    fill = Fill(fill)
    levels = level_specs(level_shapes)
    for name, v in (("batch", batch), ("heads", heads), ("channels", channels)):
        if int(v) < 1:
            raise SizeError(f"{name} must be positive, got {v}")
    shape = (int(batch), total_pixels(levels), int(heads), int(channels))
    _check_extents(shape, dtype.itemsize)

    if fill is Fill.ZEROS:
        storage = np.zeros(shape, dtype=dtype.np)
    elif fill is Fill.SEQUENTIAL:
        storage = np.arange(np.prod(shape), dtype=np.float64).reshape(shape).astype(dtype.np)
    else:
        rng = np.random.default_rng(seed)
        storage = rng.uniform(-1.0, 1.0, size=shape).astype(np.float32).astype(dtype.np)
    return FeaturePyramid(levels, shape[0], shape[2], shape[3], Layout.CHANNEL_LAST, _frozen(storage))


def to_pixel_last(p: FeaturePyramid, padded: bool = False) -> FeaturePyramid:
    """Move the pixel axis last, optionally padding every level row by one zero."""
    if p.layout is not Layout.CHANNEL_LAST:
        raise InputError(f"to_pixel_last expects a channel_last pyramid, got {p.layout.value}")
    pl = np.ascontiguousarray(p.storage.transpose(0, 2, 3, 1))
    if not padded:
        return p.with_storage(pl, Layout.PIXEL_LAST)
    out = np.zeros(p.expected_shape(Layout.PIXEL_LAST_PADDED), dtype=p.storage.dtype)
    for lv, poff in zip(p.levels, padded_offsets(p.levels)):
        src = pl[..., lv.offset:lv.offset + lv.pixels].reshape(p.batch, p.heads, p.channels, lv.height, lv.width)
        dst = out[..., poff:poff + lv.padded_pixels].reshape(
            p.batch, p.heads, p.channels, lv.height, lv.padded_stride)
        dst[..., :lv.width] = src
    return p.with_storage(out, Layout.PIXEL_LAST_PADDED)


def unpad_pixels(data: np.ndarray, levels: Sequence[LevelSpec]) -> np.ndarray:
    """Drop the pad column from a ``(..., total_padded_pixels)`` array."""
    lead = data.shape[:-1]
    out = np.empty(lead + (total_pixels(levels),), dtype=data.dtype)
    for lv, poff in zip(levels, padded_offsets(levels)):
        src = data[..., poff:poff + lv.padded_pixels].reshape(lead + (lv.height, lv.padded_stride))
        out[..., lv.offset:lv.offset + lv.pixels] = src[..., :lv.width].reshape(lead + (lv.pixels,))
    return out


def to_channel_last(p: FeaturePyramid) -> FeaturePyramid:
    if p.layout is Layout.CHANNEL_LAST:
        return p
    data = p.storage
    if p.layout is Layout.PIXEL_LAST_PADDED:
        data = unpad_pixels(data, p.levels)
    return p.with_storage(np.ascontiguousarray(data.transpose(0, 3, 1, 2)), Layout.CHANNEL_LAST)


@dataclass(frozen=True)
class SamplingTensors:
    """Sampling locations ``(B, Q, heads, levels, points, 2)`` and weights ``(B, Q, heads, levels, points)``."""

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        loc, w = self.locations, self.weights
        if loc.ndim != 6 or loc.shape[-1] != 2:
            raise ShapeError(f"locations must be (B,Q,heads,levels,points,2), got {loc.shape}", axis="locations")
        if w.shape != loc.shape[:-1]:
            raise ShapeError(f"weights shape {w.shape} does not match locations {loc.shape[:-1]}", axis="weights")
        if not (np.all(np.isfinite(loc)) and np.all(np.isfinite(w))):
            raise InputError("sampling locations and weights must be finite")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.weights.shape)


def random_sampling(
    batch: int,
    queries: int,
    heads: int,
    levels: int,
    points: int,
    seed: int = 0,
    spread: float = 0.0,
    normalize: bool = True,
) -> SamplingTensors:
    """Seeded random sampling tensors.

    Locations are uniform over ``[-spread, 1 + spread]``; weights are
    softmax-normalized over levels x points when ``normalize`` is set.
    """
    rng = np.random.default_rng(seed)
    shape = (batch, queries, heads, levels, points)
    loc = rng.uniform(-spread, 1.0 + spread, size=shape + (2,)).astype(np.float32)
    logits = rng.standard_normal(size=shape).astype(np.float32)
    if normalize:
        flat = logits.reshape(batch, queries, heads, levels * points)
        e = np.exp(flat - flat.max(axis=-1, keepdims=True))
        w = (e / e.sum(axis=-1, keepdims=True)).reshape(shape).astype(np.float32)
    else:
        w = logits
    return SamplingTensors(loc, w)


# -- XMSD binary format ----------------------------------------------------

_HEAD = struct.Struct("<4sIII")


def encode_tensor(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    dtype = Dtype.of(t)
    _check_extents(t.shape, dtype.itemsize)
    if t.ndim > MAX_RANK:
        raise SizeError(f"rank {t.ndim} exceeds {MAX_RANK}")
    header = _HEAD.pack(MAGIC, FORMAT_VERSION, int(dtype), t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=dtype.np.newbyteorder("<")).tobytes()
    return header + dims + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise FormatError(f"truncated header: {len(buf)} of {_HEAD.size} bytes", len(buf))
    magic, version, code, rank = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", 4)
    try:
        dtype = Dtype(code)
    except ValueError:
        raise FormatError(f"unknown dtype code {code}", 8) from None
    if rank < 1 or rank > MAX_RANK:
        raise FormatError(f"invalid rank {rank}", 12)
    pos = _HEAD.size
    if len(buf) < pos + 8 * rank:
        raise FormatError("truncated dims", len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, pos)
    for i, d in enumerate(dims):
        if d < 1:
            raise FormatError(f"dim {i} is zero", pos + 8 * i)
    pos += 8 * rank
    count = int(np.prod(dims, dtype=object))
    need = count * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", len(buf))
    if len(buf) - pos > need:
        raise FormatError(f"{len(buf) - pos - need} trailing bytes after payload", pos + need)
    data = np.frombuffer(buf, dtype=dtype.np.newbyteorder("<"), count=count, offset=pos)
    return data.astype(dtype.np).reshape(dims)


PathOrFile = Union[str, os.PathLike, BinaryIO]


def write_tensor(t: np.ndarray, sink: PathOrFile) -> None:
    """Serialize ``t`` to a path or writable binary file object."""
    blob = encode_tensor(t)
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as f:
            f.write(blob)
    else:
        sink.write(blob)


def read_tensor(source: Union[PathOrFile, bytes]) -> np.ndarray:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode_tensor(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as f:
            return decode_tensor(f.read())
    return decode_tensor(source.read())


__all__ = [
    "Dtype", "Layout", "Fill", "LevelSpec", "FeaturePyramid", "SamplingTensors",
    "level_specs", "total_pixels", "padded_offsets", "total_padded_pixels",
    "make_pyramid", "from_array", "to_pixel_last", "to_channel_last", "unpad_pixels",
    "random_sampling", "encode_tensor", "decode_tensor", "write_tensor", "read_tensor",
]
