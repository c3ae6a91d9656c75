"""Optimization flags and kernel planning (chunk lengths, partition, scatter strategy)."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

from ..errors import InputError, PlanError
from ..reference import MsdaConfig
from . import kernels

# 192 KiB: the on-chip buffer size the tile budget is modeled on.
DEFAULT_TILE_BUDGET = 196608
MIN_CHUNK = 8
MAX_CHUNK = 4096
STAGE_BYTES = 4  # float32 staging of one saved sample channel


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class OptFlags:
    adaptive_veclen: bool = True
    gather_fusion: bool = True
    staggered_write: bool = True
    scatter_fusion: bool = True
    tile_budget_bytes: int = DEFAULT_TILE_BUDGET
    workers: int = 0  # 0 = available hardware parallelism

    def __post_init__(self):
        if self.workers < 0:
            raise InputError(f"workers must be >= 0, got {self.workers}")
        if self.workers == 0:
            object.__setattr__(self, "workers", default_workers())

    def without(self, *names: str) -> "OptFlags":
        """Copy with the named toggles switched off."""
        return replace(self, **{n: False for n in names})

    @classmethod
    def all_combinations(cls, **kw) -> list["OptFlags"]:
        out = []
        for bits in range(16):
            out.append(cls(adaptive_veclen=bool(bits & 1), gather_fusion=bool(bits & 2),
                           staggered_write=bool(bits & 4), scatter_fusion=bool(bits & 8), **kw))
        return out

    def label(self) -> str:
        off = [n for n, on in (("adaptive_veclen", self.adaptive_veclen), ("gather_fusion", self.gather_fusion),
                               ("staggered_write", self.staggered_write), ("scatter_fusion", self.scatter_fusion))
               if not on]
        return "default" if not off else "-" + ",-".join(off)


@dataclass(frozen=True)
class ScatterStrategy:
    staggered: bool
    fused: bool
    shards: int


@dataclass(frozen=True)
class KernelPlan:
    chunk_points: tuple[int, ...]  # forward, per level
    backward_chunk_points: tuple[int, ...]
    padded: tuple[bool, ...]
    partition: tuple[tuple[int, int], ...]
    scatter: ScatterStrategy

    def chunk_queries(self, level: int, points: int, backward: bool = False) -> int:
        chunks = self.backward_chunk_points if backward else self.chunk_points
        return max(1, chunks[level] // points)


def resident_bytes(height: int, width: int, budget: int, per_point: int) -> int:
    """Budget share taken by the level's own data.

    A whole padded F32 channel plane is resident when it fits beside a
    minimum chunk; otherwise the level is streamed and only one padded row
    is staged.
    """
    row = (width + 1) * 4
    plane = height * row
    return plane if plane + MIN_CHUNK * per_point <= budget else row


def point_bytes(cfg: MsdaConfig, fused: bool = True, backward: bool = False) -> int:
    """Chunk working-buffer bytes per sampling point for the given kernel path."""
    if backward:
        return kernels.BWD_FUSED_BYTES if fused else kernels.BWD_SCALAR_BYTES
    per = kernels.FWD_FUSED_BYTES if fused else kernels.FWD_SCALAR_BYTES
    if cfg.train:
        per += cfg.channels * STAGE_BYTES
    return per


def adaptive_chunk(cfg: MsdaConfig, level: int, budget: int, fused: bool = True,
                   backward: bool = False) -> int:
    """Largest power-of-two chunk (in points) whose buffers fit beside the level's resident data."""
    lv = cfg.levels[level]
    per = point_bytes(cfg, fused, backward)
    available = budget - resident_bytes(lv.height, lv.width, budget, per)
    if available < MIN_CHUNK * per:
        raise PlanError(
            f"tile budget {budget} B leaves {max(available, 0)} B for level {level} "
            f"({lv.height}x{lv.width}); need at least {MIN_CHUNK * per} B")
    chunk = MIN_CHUNK
    while chunk * 2 <= MAX_CHUNK and chunk * 2 * per <= available:
        chunk *= 2
    return chunk


def partition(total: int, workers: int) -> tuple[tuple[int, int], ...]:
    """Contiguous, near-equal split of ``range(total)`` into ``workers`` pieces."""
    base, extra = divmod(total, workers)
    out, start = [], 0
    for i in range(workers):
        stop = start + base + (1 if i < extra else 0)
        out.append((start, stop))
        start = stop
    return tuple(out)


def plan(cfg: MsdaConfig, flags: OptFlags) -> KernelPlan:
    """Choose per-level chunk lengths, layouts, worker partition and scatter strategy.

    With ``adaptive_veclen`` every level gets the largest power-of-two chunk
    whose buffers fit beside that level's resident data; without it every
    level uses the most conservative of those choices.
    """
    budget = int(flags.tile_budget_bytes)
    if budget < 1:
        raise PlanError(f"tile budget must be positive, got {budget}")

    def chunks(fused: bool, backward: bool) -> tuple[int, ...]:
        adaptive = tuple(adaptive_chunk(cfg, l, budget, fused, backward) for l in range(cfg.num_levels))
        return adaptive if flags.adaptive_veclen else (min(adaptive),) * cfg.num_levels

    return KernelPlan(
        chunk_points=chunks(flags.gather_fusion, False),
        backward_chunk_points=chunks(flags.scatter_fusion, True),
        padded=(flags.gather_fusion,) * cfg.num_levels,
        partition=partition(cfg.batch * cfg.queries, flags.workers),
        scatter=ScatterStrategy(flags.staggered_write, flags.scatter_fusion, flags.workers),
    )
