"""Seeded random instances and the optimized-vs-reference equivalence suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .optimized import OptFlags, msda_backward_opt, msda_forward_opt
from .reference import MsdaConfig, MsdaGrads, Mode, msda_backward_ref, msda_forward_ref
from .tensor import Dtype, FeaturePyramid, SamplingTensors, make_pyramid, random_sampling

F32_TOL = 1e-5
F16_TOL = 2e-3  # forward output stored back to binary16


def max_rel_error(actual, expected) -> tuple[float, tuple]:
    """Normwise relative error ``max|a - e| / max|e|`` and the index of the worst element.

    Falls back to the absolute error when ``expected`` is all zeros.
    """
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {e.shape}")
    if a.size == 0:
        return 0.0, ()
    diff = np.abs(a - e)
    worst = np.unravel_index(int(np.argmax(diff)), diff.shape)
    scale = float(np.abs(e).max())
    err = float(diff.max()) / scale if scale > 0 else float(diff.max())
    return err, tuple(int(i) for i in worst)


@dataclass
class Instance:
    seed: int
    cfg: MsdaConfig
    pyramid: FeaturePyramid
    sampling: SamplingTensors
    grad_output: np.ndarray


def _snap_to_lattice(loc: np.ndarray, levels, rng: np.random.Generator, fraction: float) -> np.ndarray:
    """Move a random subset of coordinates exactly onto pixel centres or pixel edges."""
    loc = loc.copy()
    for l, lv in enumerate(levels):
        for axis, extent in ((0, lv.width), (1, lv.height)):
            view = loc[:, :, :, l, :, axis]
            mask = rng.random(view.shape) < fraction
            k = rng.integers(-1, extent + 1, size=view.shape)
            half = rng.integers(0, 2, size=view.shape) * 0.5
            view[mask] = ((k + half) / extent)[mask]
    return loc.astype(np.float32)


def random_instance(seed: int, dtype: Optional[Dtype] = None, mode: Optional[Mode] = None) -> Instance:
    """Small random problem: batch 1-2, 1-5 levels of 1-9 px sides, some points
    outside the map and some exactly on lattice points."""
    rng = np.random.default_rng(seed)
    batch = int(rng.integers(1, 3))
    nlev = int(rng.integers(1, 6))
    shapes = [(int(rng.integers(1, 10)), int(rng.integers(1, 10))) for _ in range(nlev)]
    queries = int(rng.integers(1, 7))
    heads = int(rng.integers(1, 4))
    channels = int(rng.integers(1, 6))
    points = int(rng.integers(1, 5))
    dtype = Dtype.parse(dtype) if dtype is not None else (Dtype.F16 if seed % 2 else Dtype.F32)
    mode = Mode(mode) if mode is not None else (Mode.TRAIN if rng.random() < 0.5 else Mode.INFERENCE)
    cfg = MsdaConfig.build(batch, queries, heads, channels, shapes, points, mode)
    p = make_pyramid(batch, heads, channels, shapes, dtype=dtype, fill="random", seed=seed)
    raw = random_sampling(batch, queries, heads, nlev, points, seed=seed + 7919, spread=0.3)
    loc = _snap_to_lattice(raw.locations, cfg.levels, rng, 0.25)
    g = rng.uniform(-1, 1, (batch, queries, cfg.embed_dim)).astype(np.float32)
    return Instance(seed, cfg, p, SamplingTensors(loc, raw.weights), g)


@dataclass
class CaseResult:
    seed: int
    flags: str
    tensor: str
    error: float
    tol: float
    worst_index: tuple

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


Backward = Callable[..., MsdaGrads]


def corrupted_backward(p, s, cfg, flags, grad_output, saved=None) -> MsdaGrads:
    """Optimized backward with the attention-weight gradient doubled (checker sanity)."""
    g = msda_backward_opt(p, s, cfg, flags, grad_output, saved)
    return MsdaGrads(g.grad_value, g.grad_locations, g.grad_weights * 2)


def check_instance(inst: Instance, flag_sets: Sequence[OptFlags],
                   backward: Optional[Backward] = None) -> list[CaseResult]:
    backward = backward or msda_backward_opt
    cfg, p, s, g = inst.cfg, inst.pyramid, inst.sampling, inst.grad_output
    out_ref, saved_ref = msda_forward_ref(p, s, cfg)
    grads_ref = msda_backward_ref(p, s, cfg, g)
    out_tol = F16_TOL if p.dtype is Dtype.F16 else F32_TOL
    results = []
    for flags in flag_sets:
        label = flags.label()
        out, saved = msda_forward_opt(p, s, cfg, flags)
        grads = backward(p, s, cfg, flags, g, saved)
        pairs = [("output", out, out_ref, out_tol)]
        if cfg.train:
            pairs.append(("saved", saved.sampled, saved_ref.sampled, F32_TOL))
        pairs += [("grad_value", grads.grad_value, grads_ref.grad_value, F32_TOL),
                  ("grad_locations", grads.grad_locations, grads_ref.grad_locations, F32_TOL),
                  ("grad_weights", grads.grad_weights, grads_ref.grad_weights, F32_TOL)]
        for name, a, e, tol in pairs:
            err, worst = max_rel_error(a, e)
            results.append(CaseResult(inst.seed, label, name, err, tol, worst))
    return results


def oracle_suite(seeds: Iterable[int], flag_sets: Optional[Sequence[OptFlags]] = None,
                 backward: Optional[Backward] = None, workers: Optional[int] = None) -> list[CaseResult]:
    """Compare every flag combination against the reference on each seeded instance.

    Unless ``workers`` is given, the worker count cycles through 1-3 by seed.
    """
    flag_sets = flag_sets or OptFlags.all_combinations()
    out = []
    for seed in seeds:
        inst = random_instance(seed)
        workers_i = workers or 1 + seed % 3
        sets = [OptFlags(f.adaptive_veclen, f.gather_fusion, f.staggered_write, f.scatter_fusion,
                         f.tile_budget_bytes, workers_i) for f in flag_sets]
        out.extend(check_instance(inst, sets, backward))
    return out
