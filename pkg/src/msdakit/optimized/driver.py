"""Host-side orchestration of the optimized kernels: layouts, worker threads, shard rounds."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InputError
from ..reference import MsdaConfig, MsdaGrads, SavedForward, check_inputs
from ..tensor import (
    FeaturePyramid,
    Layout,
    SamplingTensors,
    padded_offsets,
    to_channel_last,
    total_padded_pixels,
)
from . import kernels
from .plan import KernelPlan, OptFlags, partition, plan

_DUMMY_SAVED = np.zeros((1, 1, 1, 1, 1), np.float32)


@dataclass
class ValueBuffer:
    """Flat float32 pixel-last buffer plus the geometry the kernels need."""

    data: np.ndarray
    padded: bool
    plane: int  # elements per (batch, head, channel) plane
    offsets: np.ndarray  # level start inside a plane, guard excluded

    @property
    def guard(self) -> int:
        return 1 if self.padded else 0


def _level_arrays(levels, padded: bool):
    heights = np.array([lv.height for lv in levels], np.int64)
    widths = np.array([lv.width for lv in levels], np.int64)
    src_off = np.array([lv.offset for lv in levels], np.int64)
    dst_off = np.array(padded_offsets(levels) if padded else src_off, np.int64)
    return heights, widths, src_off, dst_off


def _plane_jobs(p: FeaturePyramid, workers: int) -> list[tuple[int, int]]:
    planes = p.batch * p.heads
    return [pr for pr in partition(planes, min(workers, planes)) if pr[1] > pr[0]]


def value_buffer(p: FeaturePyramid, padded: bool, pool: Optional[ThreadPoolExecutor] = None,
                 workers: int = 1) -> ValueBuffer:
    """Float32 pixel-last copy of ``p`` (padded rows and a leading zero guard if requested)."""
    guard = 1 if padded else 0
    plane = total_padded_pixels(p.levels) if padded else p.total_pixels
    offs = np.asarray(padded_offsets(p.levels) if padded else [lv.offset for lv in p.levels], np.int64)
    want = Layout.PIXEL_LAST_PADDED if padded else Layout.PIXEL_LAST
    data = np.empty(guard + p.batch * p.heads * p.channels * plane, np.float32)
    data[:guard] = 0.0
    if p.layout is want:
        data[guard:] = p.storage.reshape(-1)
        return ValueBuffer(data, padded, plane, offs)
    if p.layout is not Layout.CHANNEL_LAST:
        p = to_channel_last(p)
    src = p.storage if p.storage.dtype == np.float32 else p.storage.astype(np.float32)
    heights, widths, src_off, dst_off = _level_arrays(p.levels, padded)
    jobs = [(src, data, heights, widths, src_off, dst_off, padded, guard, plane, lo, hi)
            for lo, hi in _plane_jobs(p, workers)]
    if pool is None:
        for job in jobs:
            kernels.pack_planes(*job)
    else:
        _run(pool, kernels.pack_planes, jobs)
    return ValueBuffer(data, padded, plane, offs)


def _run(pool: ThreadPoolExecutor, fn, jobs) -> list:
    futures = [pool.submit(fn, *job) for job in jobs]
    return [f.result() for f in futures]


def _flat_sampling(s: SamplingTensors, cfg: MsdaConfig):
    bq = cfg.batch * cfg.queries
    loc = np.ascontiguousarray(s.locations, dtype=np.float32).reshape(bq, cfg.heads, cfg.num_levels, cfg.points, 2)
    attn = np.ascontiguousarray(s.weights, dtype=np.float32).reshape(bq, cfg.heads, cfg.num_levels, cfg.points)
    return loc, attn


def forward(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig, flags: OptFlags,
            kplan: Optional[KernelPlan] = None):
    check_inputs(p, s, cfg)
    kplan = kplan or plan(cfg, flags)
    fused = kplan.padded[0]
    loc, attn = _flat_sampling(s, cfg)
    bq = cfg.batch * cfg.queries
    out = np.zeros((bq, cfg.embed_dim), np.float32)
    save = cfg.train
    saved = (np.empty((bq, cfg.heads, cfg.num_levels, cfg.points, cfg.channels), np.float32)
             if save else _DUMMY_SAVED)

    with ThreadPoolExecutor(max_workers=len(kplan.partition)) as pool:
        vb = value_buffer(p, fused, pool, len(kplan.partition))
        for l, lv in enumerate(cfg.levels):
            cq = kplan.chunk_queries(l, cfg.points)
            jobs = [(vb.data, loc, attn, l, lv.height, lv.width, int(vb.offsets[l]), vb.plane, cfg.queries,
                     cfg.channels, start, stop, cq, fused, out, saved, save)
                    for start, stop in kplan.partition if stop > start]
            _run(pool, kernels.forward_level, jobs)

    output = out.reshape(cfg.batch, cfg.queries, cfg.embed_dim).astype(p.dtype.np, copy=False)
    if not save:
        return output, None
    sampled = saved.reshape(cfg.batch, cfg.queries, cfg.heads, cfg.num_levels, cfg.points, cfg.channels)
    return output, SavedForward(sampled.astype(cfg.saved_dtype.np, copy=False))


def row_shards(cfg: MsdaConfig, shards: int, padded: bool) -> tuple[np.ndarray, np.ndarray]:
    """Map every level row to a shard of the pixel axis; returns ``(row_base, row_shard)``.

    Shards are contiguous runs of whole rows holding roughly equal pixel counts.
    """
    rows = sum(lv.height for lv in cfg.levels)
    total = sum(lv.height * (lv.width + (1 if padded else 0)) for lv in cfg.levels)
    row_base = np.zeros(cfg.num_levels, np.int64)
    row_shard = np.empty(rows, np.int32)
    r = 0
    pix = 0
    for l, lv in enumerate(cfg.levels):
        row_base[l] = r
        stride = lv.width + (1 if padded else 0)
        for _ in range(lv.height):
            row_shard[r] = min(shards - 1, (pix * shards) // total)
            pix += stride
            r += 1
    return row_base, row_shard


@dataclass
class BackwardResult:
    grads: MsdaGrads
    raw_value_grad: np.ndarray  # kernel-layout buffer, kept for pad inspection
    value_buffer: ValueBuffer


def backward_raw(p: FeaturePyramid, s: SamplingTensors, cfg: MsdaConfig, flags: OptFlags,
                 grad_output: np.ndarray, saved: Optional[SavedForward] = None,
                 kplan: Optional[KernelPlan] = None) -> BackwardResult:
    grad_output = np.asarray(grad_output)
    check_inputs(p, s, cfg, grad_output)
    kplan = kplan or plan(cfg, flags)
    bq = cfg.batch * cfg.queries
    sampled_shape = (cfg.batch, cfg.queries, cfg.heads, cfg.num_levels, cfg.points, cfg.channels)
    if saved is not None:
        if tuple(saved.sampled.shape) != sampled_shape:
            raise InputError(f"saved samples have shape {saved.sampled.shape}, expected {sampled_shape}")
        saved_arr = np.ascontiguousarray(saved.sampled, dtype=np.float32).reshape(
            bq, cfg.heads, cfg.num_levels, cfg.points, cfg.channels)
    else:
        saved_arr = _DUMMY_SAVED

    fused = kplan.scatter.fused
    staggered = kplan.scatter.staggered
    loc, attn = _flat_sampling(s, cfg)
    gflat = np.ascontiguousarray(grad_output, dtype=np.float32).reshape(-1)
    grad_loc = np.zeros(loc.shape, np.float32)
    grad_w = np.zeros(attn.shape, np.float32)
    parts = [pr for pr in kplan.partition]
    nworkers = len(parts)
    shards = kplan.scatter.shards
    row_base, row_shard = row_shards(cfg, shards, fused)
    per_point = 2 if fused else 4

    with ThreadPoolExecutor(max_workers=nworkers) as pool:
        vb = value_buffer(p, fused, pool, nworkers)
        gv = np.zeros_like(vb.data)
        for l, lv in enumerate(cfg.levels):
            cq = kplan.chunk_queries(l, cfg.points, backward=True)
            if staggered:
                bufs = []
                for start, stop in parts:
                    cap = max(1, (stop - start) * cfg.heads * cfg.points * per_point)
                    bufs.append((np.empty(cap, np.uint64), np.empty(cap, np.float32), np.empty(cap, np.float32),
                                 np.empty(cap, np.int64), np.empty(cap, np.int32)))
            else:
                empty = (np.empty(0, np.uint64), np.empty(0, np.float32), np.empty(0, np.float32),
                         np.empty(0, np.int64), np.empty(0, np.int32))
                bufs = [empty] * nworkers
            jobs = [(vb.data, loc, attn, gflat, l, lv.height, lv.width, int(vb.offsets[l]),
                     int(row_base[l]), vb.plane, cfg.queries, cfg.channels, start, stop, cq, fused, staggered,
                     gv, grad_loc, grad_w, saved_arr, saved is not None, row_shard, *buf)
                    for (start, stop), buf in zip(parts, bufs)]
            counts = _run(pool, _backward_job, jobs)
            if not staggered:
                continue

            buckets = _run(pool, kernels.bucket_by_shard,
                           [(buf[4], n, shards) for buf, n in zip(bufs, counts)])
            for rnd in range(shards):
                round_jobs = []
                for i, (buf, (order, offs)) in enumerate(zip(bufs, buckets)):
                    shard = (i + rnd) % shards
                    lo, hi = int(offs[shard]), int(offs[shard + 1])
                    if hi > lo:
                        round_jobs.append((gv, gflat, buf[0], buf[1], buf[2], buf[3], order, lo, hi,
                                           cfg.channels, vb.plane, fused))
                _run(pool, kernels.scatter_bucket, round_jobs)

        grad_value = np.empty((cfg.batch, p.total_pixels, cfg.heads, cfg.channels), np.float32)
        heights, widths, dst_off, src_off = _level_arrays(p.levels, fused)
        _run(pool, kernels.unpack_planes,
             [(gv, grad_value, heights, widths, src_off, dst_off, fused, vb.guard, vb.plane, lo, hi)
              for lo, hi in _plane_jobs(p, nworkers)])
    grads = MsdaGrads(
        grad_value,
        grad_loc.reshape(s.locations.shape),
        grad_w.reshape(s.weights.shape),
    )
    return BackwardResult(grads, gv, vb)


def _backward_job(*args):
    return kernels.backward_level(*args)


def backward(p, s, cfg, flags, grad_output, saved=None, kplan=None) -> MsdaGrads:
    return backward_raw(p, s, cfg, flags, grad_output, saved, kplan).grads
