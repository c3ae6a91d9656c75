"""Wall-clock comparison of reference vs optimized kernels and the ablation matrix."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import InputError
from .optimized import OptFlags, msda_backward_opt, msda_forward_opt
from .reference import Mode, MsdaConfig, msda_backward_ref, msda_forward_ref, paper_config
from .tensor import FeaturePyramid, SamplingTensors, make_pyramid, random_sampling

PRESETS = ("paper", "small")
SMALL_QUERIES = 64


@dataclass
class Timing:
    samples: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.samples)

    @property
    def mad(self) -> float:
        """Median absolute deviation from the median."""
        m = self.median
        return statistics.median(abs(x - m) for x in self.samples)


def time_interleaved(fns: dict[str, Callable[[], object]], repeats: int, warmup: int = 1) -> dict[str, Timing]:
    """Time every callable ``repeats`` times, round-robin, so slow drift hits all of them alike."""
    if repeats < 1:
        raise InputError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        for fn in fns.values():
            fn()
    out = {k: Timing([]) for k in fns}
    for _ in range(repeats):
        for k, fn in fns.items():
            t0 = time.perf_counter()
            fn()
            out[k].samples.append(time.perf_counter() - t0)
    return out


def preset_config(name: str, mode=Mode.INFERENCE) -> MsdaConfig:
    """``paper``: the full 87296-query workload; ``small``: same pyramid, 64 queries."""
    if name == "paper":
        return paper_config(mode)
    if name == "small":
        cfg = paper_config(mode)
        return MsdaConfig(cfg.batch, SMALL_QUERIES, cfg.heads, cfg.channels, cfg.levels, cfg.points, cfg.mode)
    raise InputError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")


@dataclass
class Problem:
    cfg: MsdaConfig
    pyramid: FeaturePyramid
    sampling: SamplingTensors
    grad_output: np.ndarray


def make_problem(cfg: MsdaConfig, seed: int = 0) -> Problem:
    p = make_pyramid(cfg.batch, cfg.heads, cfg.channels, cfg.level_shapes, fill="random", seed=seed)
    s = random_sampling(cfg.batch, cfg.queries, cfg.heads, cfg.num_levels, cfg.points, seed=seed + 1)
    g = np.random.default_rng(seed + 2).standard_normal((cfg.batch, cfg.queries, cfg.embed_dim)).astype(np.float32)
    return Problem(cfg, p, s, g)


@dataclass
class BenchRow:
    impl: str  # reference | optimized
    direction: str  # forward | backward
    timing: Timing


def bench(problem: Problem, repeats: int, workers: int = 0, warmup: Optional[int] = None) -> list[BenchRow]:
    """Four rows: reference/optimized x forward/backward.

    In train mode the optimized backward consumes the optimized forward's
    saved samples; the reference backward always recomputes.
    """
    cfg, p, s, g = problem.cfg, problem.pyramid, problem.sampling, problem.grad_output
    flags = OptFlags(workers=workers)
    saved = msda_forward_opt(p, s, cfg, flags)[1] if cfg.train else None
    warmup = (0 if repeats == 1 else 1) if warmup is None else warmup
    fns = {
        ("reference", "forward"): lambda: msda_forward_ref(p, s, cfg),
        ("optimized", "forward"): lambda: msda_forward_opt(p, s, cfg, flags),
        ("reference", "backward"): lambda: msda_backward_ref(p, s, cfg, g),
        ("optimized", "backward"): lambda: msda_backward_opt(p, s, cfg, flags, g, saved),
    }
    times = time_interleaved(fns, repeats, warmup)
    return [BenchRow(impl, d, times[(impl, d)]) for impl, d in fns]


FORWARD_VARIANTS = (
    ("Default", ()),
    ("-Adaptive VecLen", ("adaptive_veclen",)),
    ("-Gather Fusion", ("gather_fusion",)),
    ("-All", ("adaptive_veclen", "gather_fusion")),
)
BACKWARD_VARIANTS = (
    ("Default", ()),
    ("-Staggered Write", ("staggered_write",)),
    ("-Scatter Fusion", ("scatter_fusion",)),
    ("-All", ("staggered_write", "scatter_fusion")),
)


@dataclass
class AblationRow:
    table: str  # forward-inference | forward-train | backward
    variant: str
    flags: OptFlags
    timing: Timing
    ratio: float = 1.0  # median / Default median

    @property
    def faster_than_default(self) -> bool:
        return self.ratio < 1.0


def _finish(table: str, variants, flag_sets, times) -> list[AblationRow]:
    rows = [AblationRow(table, name, f, times[name]) for (name, _), f in zip(variants, flag_sets)]
    base = rows[0].timing.median
    for r in rows:
        r.ratio = r.timing.median / base
    return rows


def ablate_forward(problem: Problem, repeats: int, workers: int = 0, warmup: int = 1) -> list[AblationRow]:
    cfg, p, s = problem.cfg, problem.pyramid, problem.sampling
    base = OptFlags(workers=workers)
    flag_sets = [base.without(*off) for _, off in FORWARD_VARIANTS]
    fns = {name: (lambda f=f: msda_forward_opt(p, s, cfg, f)) for (name, _), f in zip(FORWARD_VARIANTS, flag_sets)}
    times = time_interleaved(fns, repeats, warmup)
    return _finish(f"forward-{cfg.mode.value}", FORWARD_VARIANTS, flag_sets, times)


def ablate_backward(problem: Problem, repeats: int, workers: int = 0, warmup: int = 1) -> list[AblationRow]:
    cfg, p, s, g = problem.cfg, problem.pyramid, problem.sampling, problem.grad_output
    base = OptFlags(workers=workers)
    flag_sets = [base.without(*off) for _, off in BACKWARD_VARIANTS]
    fns = {name: (lambda f=f: msda_backward_opt(p, s, cfg, f, g))
           for (name, _), f in zip(BACKWARD_VARIANTS, flag_sets)}
    times = time_interleaved(fns, repeats, warmup)
    return _finish("backward", BACKWARD_VARIANTS, flag_sets, times)


def ablate(preset: str, repeats: int, workers: int = 0, seed: int = 0) -> list[AblationRow]:
    """The 4 + 4 + 4 rows: forward inference, forward train, backward."""
    rows = []
    for mode in (Mode.INFERENCE, Mode.TRAIN):
        rows += ablate_forward(make_problem(preset_config(preset, mode), seed), repeats, workers)
    rows += ablate_backward(make_problem(preset_config(preset, Mode.INFERENCE), seed), repeats, workers)
    return rows
