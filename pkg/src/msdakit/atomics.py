"""Lock-free atomic read-modify-write primitives for numba CPU kernels, plus
a merged two-element load.

numba exposes atomics only for GPU targets; these intrinsics emit LLVM
``atomicrmw`` / ``cmpxchg`` instructions directly so threaded nogil kernels
can share a destination buffer.
"""

from __future__ import annotations

import numpy as np
from numba import njit, types
from llvmlite import ir
from numba.core import cgutils
from numba.extending import intrinsic


def _item_pointer(context, builder, aryty, ary, idx):
    a = context.make_array(aryty)(context, builder, ary)
    return cgutils.get_item_pointer(context, builder, aryty, a, [idx], wraparound=False)


@intrinsic
def load_pair_sum(typingctx, arr, idx):
    """``int64(arr[idx]) + int64(arr[idx + 1])`` fetched with one unaligned load.

    Lanes narrower than 64 bits are read as a single integer of twice the
    width (measured faster than a vector load here); 64-bit
    lanes use a two-lane vector load. Unsigned integer arrays only; the
    caller guarantees ``idx + 1`` is in bounds.
    """
    if (not isinstance(arr, types.Array) or arr.ndim != 1 or not isinstance(idx, types.Integer)
            or not isinstance(arr.dtype, types.Integer) or arr.dtype.signed):
        return None

    def codegen(context, builder, sig, args):
        aryty = sig.args[0]
        ptr = _item_pointer(context, builder, aryty, args[0], args[1])
        lane = context.get_value_type(aryty.dtype)
        i64 = ir.IntType(64)
        if lane.width < 64:
            wide = ir.IntType(2 * lane.width)
            both = builder.load(builder.bitcast(ptr, wide.as_pointer()), align=1)
            lo = builder.trunc(both, lane)
            hi = builder.trunc(builder.lshr(both, ir.Constant(wide, lane.width)), lane)
            return builder.add(builder.zext(lo, i64), builder.zext(hi, i64))
        vec = builder.load(builder.bitcast(ptr, ir.VectorType(lane, 2).as_pointer()), align=1)
        lo = builder.extract_element(vec, ir.Constant(ir.IntType(32), 0))
        hi = builder.extract_element(vec, ir.Constant(ir.IntType(32), 1))
        return builder.add(lo, hi)

    return types.int64(arr, idx), codegen


@intrinsic
def atomic_add(typingctx, arr, idx, val):
    """``arr[idx] += val`` atomically; returns the previous value. 1-D arrays only."""
    if not isinstance(arr, types.Array) or arr.ndim != 1 or not isinstance(idx, types.Integer):
        return None
    dtype = arr.dtype
    if isinstance(dtype, types.Float):
        op = "fadd"
    elif isinstance(dtype, types.Integer):
        op = "add"
    else:
        return None

    def codegen(context, builder, sig, args):
        aryty, _, valty = sig.args
        ary, i, v = args
        ptr = _item_pointer(context, builder, aryty, ary, i)
        v = context.cast(builder, v, valty, aryty.dtype)
        return builder.atomic_rmw(op, ptr, v, "monotonic")

    return dtype(arr, idx, val), codegen


@intrinsic
def compare_exchange(typingctx, arr, idx, expected, desired):
    """Atomic CAS on ``arr[idx]``; returns the value observed before the exchange."""
    if not isinstance(arr, types.Array) or arr.ndim != 1 or not isinstance(arr.dtype, types.Integer):
        return None

    def codegen(context, builder, sig, args):
        aryty, _, expty, desty = sig.args
        ary, i, e, d = args
        ptr = _item_pointer(context, builder, aryty, ary, i)
        e = context.cast(builder, e, expty, aryty.dtype)
        d = context.cast(builder, d, desty, aryty.dtype)
        pair = builder.cmpxchg(ptr, e, d, "monotonic", "monotonic")
        return builder.extract_value(pair, 0)

    return arr.dtype(arr, idx, expected, desired), codegen


@intrinsic
def f32_bits(typingctx, x):
    """Bit pattern of a float32 as uint32."""
    if x != types.float32:
        return None

    def codegen(context, builder, sig, args):
        return builder.bitcast(args[0], context.get_value_type(types.uint32))

    return types.uint32(x), codegen


@intrinsic
def bits_f32(typingctx, u):
    """float32 whose bit pattern is the uint32 ``u``."""
    if u != types.uint32:
        return None

    def codegen(context, builder, sig, args):
        return builder.bitcast(args[0], context.get_value_type(types.float32))

    return types.float32(u), codegen


_LO = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


@njit(nogil=True, cache=True, inline="always")
def atomic_add_pair_f32(words, idx, v0, v1):
    """Add ``(v0, v1)`` to the float32 pair packed in ``words[idx]`` with one 64-bit CAS.

    ``words`` is a uint64 view of an even-aligned float32 buffer; lane 0 is the
    low half (little-endian).
    """
    old = words[idx]
    while True:
        lo = bits_f32(np.uint32(old & _LO)) + v0
        hi = bits_f32(np.uint32(old >> _SHIFT)) + v1
        new = np.uint64(f32_bits(lo)) | (np.uint64(f32_bits(hi)) << _SHIFT)
        seen = compare_exchange(words, idx, old, new)
        if seen == old:
            return
        old = seen


@njit(nogil=True, cache=True, inline="always")
def atomic_add_pair_i32(words, idx, v0, v1):
    """Integer counterpart of :func:`atomic_add_pair_f32` (wrapping int32 lanes)."""
    old = words[idx]
    while True:
        lo = np.uint32(old & _LO) + np.uint32(v0)
        hi = np.uint32(old >> _SHIFT) + np.uint32(v1)
        new = np.uint64(np.uint32(lo)) | (np.uint64(np.uint32(hi)) << _SHIFT)
        seen = compare_exchange(words, idx, old, new)
        if seen == old:
            return
        old = seen
