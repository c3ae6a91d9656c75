"""numba kernels for the optimized forward and backward passes.

Every kernel processes one level for one worker's contiguous slice
``[start, stop)`` of the flattened (batch, query) space, all heads.

Value and value-gradient buffers are flat float32 arrays in pixel-last order
``(batch, heads, channels, pixels)``. The padded variant stores every level
row at stride ``width + 1`` with a zero pad column and prepends one zero guard
element, so a merged ``(x0, x1)`` access starting at column -1 or ``width - 1``
reads zeros instead of a neighbouring row.

Address generation and data movement are separate passes: per chunk of
sampling points the corner indices (relative to channel 0) and weights are
materialized first, then the channel loop streams through them. Indices are
unsigned so the hot loops carry no negative-index handling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..atomics import atomic_add

ONE = np.float32(1.0)
HALF = np.float32(0.5)
ZERO = np.float32(0.0)
U1 = np.uint64(1)

_jit = dict(nogil=True, cache=True, error_model="numpy")

# Per-point chunk buffer bytes actually touched by each path, mirrored by the
# planner: corner indices (u64), 4 corner weights, attention weight, lambda_w and
# lambda_h, validity mask, row / column (i64), then per-pass extras (forward
# sample; backward 4 corner dot products plus the weight-gradient accumulator).
_ADDR_FUSED = 2 * 8 + 4 * 4 + 4 + 2 * 4 + 1 + 2 * 8
_ADDR_SCALAR = 4 * 8 + 4 * 4 + 4 + 2 * 4 + 1 + 2 * 8
FWD_FUSED_BYTES = _ADDR_FUSED + 4
FWD_SCALAR_BYTES = _ADDR_SCALAR + 4
BWD_FUSED_BYTES = _ADDR_FUSED + 4 * 4 + 4
BWD_SCALAR_BYTES = _ADDR_SCALAR + 4 * 4 + 4


@njit(inline="always", **_jit)
def _geometry(x, y, hf, wf):
    w_im = x * wf - HALF
    h_im = y * hf - HALF
    w0f = np.floor(w_im)
    h0f = np.floor(h_im)
    return int(w0f), int(h0f), w_im - w0f, h_im - h0f


@njit(inline="always", **_jit)
def _clamp(v, lo, hi):
    return min(max(v, lo), hi)


# -- address generation ------------------------------------------------------

@njit(**_jit)
def _address_fused(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                   top, bot, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol):
    """Row-pair start indices into the padded buffer plus masked corner weights."""
    Hh = attn.shape[1]
    P = attn.shape[3]
    hf = np.float32(H)
    wf = np.float32(W)
    stride = W + 1
    k = 0
    for bq in range(q0, q1):
        plane = 1 + ((bq // Q) * Hh + h) * C * Pt + base_off
        for p in range(P):
            w0, h0, lw, lh = _geometry(loc[bq, h, l, p, 0], loc[bq, h, l, p, 1], hf, wf)
            c0 = 0 <= w0 < W
            c1 = 0 <= w0 + 1 < W
            r0 = 0 <= h0 < H
            r1 = 0 <= h0 + 1 < H
            wc = _clamp(w0, -1, W - 1)
            top[k] = plane + _clamp(h0, 0, H - 1) * stride + wc
            bot[k] = plane + _clamp(h0 + 1, 0, H - 1) * stride + wc
            ih = ONE - lh
            iw = ONE - lw
            w00[k] = ih * iw if (r0 and c0) else ZERO
            w01[k] = ih * lw if (r0 and c1) else ZERO
            w10[k] = lh * iw if (r1 and c0) else ZERO
            w11[k] = lh * lw if (r1 and c1) else ZERO
            a[k] = attn[bq, h, l, p]
            lws[k] = lw
            lhs[k] = lh
            valid[k] = (r0 and c0) | ((r0 and c1) << 1) | ((r1 and c0) << 2) | ((r1 and c1) << 3)
            hrow[k] = h0
            wcol[k] = wc
            k += 1
    return k


@njit(**_jit)
def _address_scalar(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                    i00, i01, i10, i11, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol):
    """Four independent corner indices into the unpadded buffer; ``valid`` bit j marks corner j in bounds."""
    Hh = attn.shape[1]
    P = attn.shape[3]
    hf = np.float32(H)
    wf = np.float32(W)
    k = 0
    for bq in range(q0, q1):
        plane = ((bq // Q) * Hh + h) * C * Pt + base_off
        for p in range(P):
            w0, h0, lw, lh = _geometry(loc[bq, h, l, p, 0], loc[bq, h, l, p, 1], hf, wf)
            c0 = 0 <= w0 < W
            c1 = 0 <= w0 + 1 < W
            r0 = 0 <= h0 < H
            r1 = 0 <= h0 + 1 < H
            i00[k] = plane + h0 * W + w0 if (r0 and c0) else 0
            i01[k] = plane + h0 * W + w0 + 1 if (r0 and c1) else 0
            i10[k] = plane + (h0 + 1) * W + w0 if (r1 and c0) else 0
            i11[k] = plane + (h0 + 1) * W + w0 + 1 if (r1 and c1) else 0
            ih = ONE - lh
            iw = ONE - lw
            w00[k] = ih * iw
            w01[k] = ih * lw
            w10[k] = lh * iw
            w11[k] = lh * lw
            a[k] = attn[bq, h, l, p]
            lws[k] = lw
            lhs[k] = lh
            valid[k] = (r0 and c0) | ((r0 and c1) << 1) | ((r1 and c0) << 2) | ((r1 and c1) << 3)
            hrow[k] = h0
            wcol[k] = w0
            k += 1
    return k


# -- forward -------------------------------------------------------------------

@njit(**_jit)
def forward_level(vflat, loc, attn, l, H, W, base_off, Pt, Q, C, start, stop, chunk_q,
                  fused, out, saved, save):
    Hh = attn.shape[1]
    P = attn.shape[3]
    n = chunk_q * P
    ia = np.empty(n, np.uint64)
    ib = np.empty(n, np.uint64)
    ic = np.empty(n, np.uint64)
    id_ = np.empty(n, np.uint64)
    w00 = np.empty(n, np.float32)
    w01 = np.empty(n, np.float32)
    w10 = np.empty(n, np.float32)
    w11 = np.empty(n, np.float32)
    a = np.empty(n, np.float32)
    samp = np.empty(n, np.float32)
    valid = np.empty(n, np.uint8)
    # scratch the forward never reads back
    lws = np.empty(n, np.float32)
    lhs = np.empty(n, np.float32)
    hrow = np.empty(n, np.int64)
    wcol = np.empty(n, np.int64)
    stage = np.empty((n, C) if save else (1, 1), np.float32)
    for h in range(Hh):
        col = h * C
        for q0 in range(start, stop, chunk_q):
            q1 = min(stop, q0 + chunk_q)
            if fused:
                m = _address_fused(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                                   ia, ib, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol)
            else:
                m = _address_scalar(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                                    ia, ib, ic, id_, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol)
            for c in range(C):
                vc = vflat[c * Pt:]
                if fused:
                    for j in range(m):
                        t = ia[j]
                        u = ib[j]
                        samp[j] = w00[j] * vc[t] + w01[j] * vc[t + U1] + w10[j] * vc[u] + w11[j] * vc[u + U1]
                else:
                    for j in range(m):
                        vm = valid[j]
                        v = ZERO
                        if vm & 1:
                            v += w00[j] * vc[ia[j]]
                        if vm & 2:
                            v += w01[j] * vc[ib[j]]
                        if vm & 4:
                            v += w10[j] * vc[ic[j]]
                        if vm & 8:
                            v += w11[j] * vc[id_[j]]
                        samp[j] = v
                if save:
                    for j in range(m):
                        stage[j, c] = samp[j]
                j = 0
                for bq in range(q0, q1):
                    s = ZERO
                    for p in range(P):
                        s += a[j] * samp[j]
                        j += 1
                    out[bq, col + c] += s
            if save:
                j = 0
                for bq in range(q0, q1):
                    for p in range(P):
                        saved[bq, h, l, p, :] = stage[j]
                        j += 1


# -- backward, phase A: per-point gradients and scatter emission ---------------

@njit(**_jit)
def backward_level(vflat, loc, attn, gflat, l, H, W, base_off, row_base, Pt, Q, C, start, stop, chunk_q,
                   fused, staggered, gv, grad_loc, grad_w, saved, use_saved, row_shard,
                   e_idx, e_c0, e_c1, e_src, e_shard):
    """Location and weight gradients for ``[start, stop)`` at level ``l``.

    Value-gradient contributions are either added atomically into ``gv``
    (``staggered`` false) or emitted as entries for the shard rounds. Returns
    the number of emitted entries.
    """
    Hh = attn.shape[1]
    P = attn.shape[3]
    E = C * Hh
    n = chunk_q * P
    ia = np.empty(n, np.uint64)
    ib = np.empty(n, np.uint64)
    ic = np.empty(n, np.uint64)
    id_ = np.empty(n, np.uint64)
    w00 = np.empty(n, np.float32)
    w01 = np.empty(n, np.float32)
    w10 = np.empty(n, np.float32)
    w11 = np.empty(n, np.float32)
    a = np.empty(n, np.float32)
    lws = np.empty(n, np.float32)
    lhs = np.empty(n, np.float32)
    valid = np.empty(n, np.uint8)
    hrow = np.empty(n, np.int64)
    wcol = np.empty(n, np.int64)
    d00 = np.empty(n, np.float32)
    d01 = np.empty(n, np.float32)
    d10 = np.empty(n, np.float32)
    d11 = np.empty(n, np.float32)
    dw = np.empty(n, np.float32)
    hf = np.float32(H)
    wf = np.float32(W)
    ne = 0
    for h in range(Hh):
        col = h * C
        for q0 in range(start, stop, chunk_q):
            q1 = min(stop, q0 + chunk_q)
            if fused:
                m = _address_fused(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                                   ia, ib, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol)
            else:
                m = _address_scalar(loc, attn, l, h, q0, q1, Q, C, Pt, H, W, base_off,
                                    ia, ib, ic, id_, w00, w01, w10, w11, a, lws, lhs, valid, hrow, wcol)
            d00[:m] = ZERO
            d01[:m] = ZERO
            d10[:m] = ZERO
            d11[:m] = ZERO
            dw[:m] = ZERO

            # channel pass: corner dot products with the output gradient
            for c in range(C):
                vc = vflat[c * Pt:]
                j = 0
                for bq in range(q0, q1):
                    gc = gflat[bq * E + col + c]
                    for p in range(P):
                        if fused:
                            t = ia[j]
                            u = ib[j]
                            x00 = vc[t]
                            x01 = vc[t + U1]
                            x10 = vc[u]
                            x11 = vc[u + U1]
                            vs = w00[j] * x00 + w01[j] * x01 + w10[j] * x10 + w11[j] * x11
                        else:
                            vm = valid[j]
                            x00 = vc[ia[j]] if vm & 1 else ZERO
                            x01 = vc[ib[j]] if vm & 2 else ZERO
                            x10 = vc[ic[j]] if vm & 4 else ZERO
                            x11 = vc[id_[j]] if vm & 8 else ZERO
                            vs = ZERO
                            if vm & 1:
                                vs += w00[j] * x00
                            if vm & 2:
                                vs += w01[j] * x01
                            if vm & 4:
                                vs += w10[j] * x10
                            if vm & 8:
                                vs += w11[j] * x11
                        d00[j] += gc * x00
                        d01[j] += gc * x01
                        d10[j] += gc * x10
                        d11[j] += gc * x11
                        if use_saved:
                            dw[j] += gc * saved[bq, h, l, p, c]
                        else:
                            dw[j] += gc * vs
                        j += 1

            # per-point gradients (disjoint writes)
            j = 0
            for bq in range(q0, q1):
                for p in range(P):
                    vm = valid[j]
                    e00 = d00[j] if vm & 1 else ZERO
                    e01 = d01[j] if vm & 2 else ZERO
                    e10 = d10[j] if vm & 4 else ZERO
                    e11 = d11[j] if vm & 8 else ZERO
                    lw = lws[j]
                    lh = lhs[j]
                    d_wim = (ONE - lh) * (e01 - e00) + lh * (e11 - e10)
                    d_him = (ONE - lw) * (e10 - e00) + lw * (e11 - e01)
                    grad_loc[bq, h, l, p, 0] = a[j] * d_wim * wf
                    grad_loc[bq, h, l, p, 1] = a[j] * d_him * hf
                    grad_w[bq, h, l, p] = dw[j]
                    j += 1

            # value-gradient contributions
            j = 0
            for bq in range(q0, q1):
                src = bq * E + col
                for p in range(P):
                    aj = a[j]
                    vm = valid[j]
                    if fused:
                        for rr in range(2):
                            if rr == 0:
                                idx = ia[j]
                                c0 = aj * w00[j]
                                c1 = aj * w01[j]
                                ok = (vm & 3) != 0
                            else:
                                idx = ib[j]
                                c0 = aj * w10[j]
                                c1 = aj * w11[j]
                                ok = (vm & 12) != 0
                            if not ok:
                                continue
                            if wcol[j] == -1:
                                # pair starting in the previous row's pad: shift
                                # onto column 0 so the write stays in this row
                                idx += U1
                                c0 = c1
                                c1 = ZERO
                            if staggered:
                                e_idx[ne] = idx
                                e_c0[ne] = c0
                                e_c1[ne] = c1
                                e_src[ne] = src
                                e_shard[ne] = row_shard[row_base + hrow[j] + rr]
                                ne += 1
                            else:
                                for c in range(C):
                                    gc = gflat[src + c]
                                    o = idx + np.uint64(c * Pt)
                                    atomic_add(gv, o, c0 * gc)
                                    atomic_add(gv, o + U1, c1 * gc)
                    else:
                        for corner in range(4):
                            if not (vm >> corner) & 1:
                                continue
                            if corner == 0:
                                idx = ia[j]
                                cj = aj * w00[j]
                            elif corner == 1:
                                idx = ib[j]
                                cj = aj * w01[j]
                            elif corner == 2:
                                idx = ic[j]
                                cj = aj * w10[j]
                            else:
                                idx = id_[j]
                                cj = aj * w11[j]
                            if staggered:
                                e_idx[ne] = idx
                                e_c0[ne] = cj
                                e_src[ne] = src
                                e_shard[ne] = row_shard[row_base + hrow[j] + (corner >> 1)]
                                ne += 1
                            else:
                                for c in range(C):
                                    atomic_add(gv, idx + np.uint64(c * Pt), cj * gflat[src + c])
                    j += 1
    return ne


# -- backward, phase B: shard-exclusive scatter rounds -------------------------

@njit(**_jit)
def bucket_by_shard(e_shard, n, shards):
    """Stable counting sort of entries ``[0, n)`` by shard id; returns ``(order, offsets)``."""
    counts = np.zeros(shards + 1, np.int64)
    for i in range(n):
        counts[e_shard[i] + 1] += 1
    for s in range(shards):
        counts[s + 1] += counts[s]
    fill = counts[:shards].copy()
    order = np.empty(n, np.int64)
    for i in range(n):
        s = e_shard[i]
        order[fill[s]] = i
        fill[s] += 1
    return order, counts


@njit(**_jit)
def scatter_bucket(gv, gflat, e_idx, e_c0, e_c1, e_src, order, lo, hi, C, Pt, fused):
    """Plain (non-atomic) adds for one worker's entries of the shard it owns this round."""
    for jj in range(lo, hi):
        e = order[jj]
        idx = e_idx[e]
        src = e_src[e]
        c0 = e_c0[e]
        if fused:
            c1 = e_c1[e]
            for c in range(C):
                gc = gflat[src + c]
                o = idx + np.uint64(c * Pt)
                gv[o] += c0 * gc
                gv[o + U1] += c1 * gc
        else:
            for c in range(C):
                gv[idx + np.uint64(c * Pt)] += c0 * gflat[src + c]


# -- layout packing --------------------------------------------------------------

@njit(**_jit)
def pack_planes(src, dst, heights, widths, src_off, dst_off, padded, guard, Pt, plane_lo, plane_hi):
    """Copy channel-last ``src`` (B, pixels, heads, C) into the flat pixel-last ``dst``.

    Handles the (batch, head) planes ``[plane_lo, plane_hi)``; pad columns are
    written as zeros so ``dst`` may be uninitialized.
    """
    Hh = src.shape[2]
    C = src.shape[3]
    for bh in range(plane_lo, plane_hi):
        b = bh // Hh
        h = bh - b * Hh
        base = guard + bh * C * Pt
        for l in range(heights.shape[0]):
            H = heights[l]
            W = widths[l]
            stride = W + 1 if padded else W
            for y in range(H):
                s0 = src_off[l] + y * W
                d0 = base + dst_off[l] + y * stride
                for c in range(C):
                    dc = d0 + c * Pt
                    for x in range(W):
                        dst[dc + x] = src[b, s0 + x, h, c]
                    if padded:
                        dst[dc + W] = ZERO


@njit(**_jit)
def unpack_planes(src, dst, heights, widths, src_off, dst_off, padded, guard, Pt, plane_lo, plane_hi):
    """Inverse of :func:`pack_planes`: flat pixel-last ``src`` into channel-last ``dst``."""
    Hh = dst.shape[2]
    C = dst.shape[3]
    for bh in range(plane_lo, plane_hi):
        b = bh // Hh
        h = bh - b * Hh
        base = guard + bh * C * Pt
        for l in range(heights.shape[0]):
            H = heights[l]
            W = widths[l]
            stride = W + 1 if padded else W
            for y in range(H):
                d0 = dst_off[l] + y * W
                s0 = base + src_off[l] + y * stride
                for x in range(W):
                    for c in range(C):
                        dst[b, d0 + x, h, c] = src[s0 + c * Pt + x]
