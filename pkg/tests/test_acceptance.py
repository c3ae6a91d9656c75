"""Acceptance criteria, one PASS/FAIL line each (echoed in the terminal summary).

The direction-of-effect timing runs the full paper-sized workload and takes
tens of minutes on a small machine.
"""

import time

import numpy as np
import pytest

from helpers import record
from msdakit import membench
from msdakit.bench import ablate_backward, ablate_forward, bench, make_problem, preset_config
from msdakit.membench import BenchKind
from msdakit.optimized import OptFlags, msda_backward_opt, msda_forward_opt, plan
from msdakit.optimized.plan import default_workers
from msdakit.reference import Mode, grad_check, msda_backward_ref, msda_forward_ref, paper_config
from msdakit.suite import max_rel_error, oracle_suite, random_instance
from test_optimized import _boundary_instance

SLACK = 0.05
TIMING_REPEATS = 10
TIMING_WORKERS = 8


def test_1_oracle_equivalence():
    t0 = time.perf_counter()
    results = oracle_suite(range(200))
    elapsed = time.perf_counter() - t0
    fails = [r for r in results if not r.passed]
    f32 = [r for r in results if r.tensor != "output" or r.tol == 1e-5]
    worst = max(r.error for r in f32)
    insts = [random_instance(s) for s in range(200)]
    f16 = sum(i.pyramid.storage.dtype == np.float16 for i in insts)
    ok = not fails and elapsed < 120
    record(1, "oracle equivalence", ok,
           f"200 instances ({f16} f16) x 16 flag sets, {len(results)} comparisons, {len(fails)} over tolerance, "
           f"worst f32 rel {worst:.2e} (tol 1e-5), {elapsed:.1f}s (limit 120s)")
    assert ok, fails[:5]


def test_2_gradient_check():
    t0 = time.perf_counter()
    reports = [grad_check(seed=s) for s in range(100)]
    elapsed = time.perf_counter() - t0
    failed = [r.seed for r in reports if not r.passed]
    worst = max(c.max_rel for r in reports for c in r.checks)
    ok = not failed and elapsed < 120
    record(2, "gradient check", ok,
           f"100 seeds, {len(failed)} failed, worst rel {worst:.2e} (tol 1e-3), {elapsed:.1f}s (limit 120s)")
    assert ok, failed


def test_3_adjoint_identity():
    worst = 0.0
    for seed in range(50):
        inst = random_instance(seed, dtype="f32")
        out, _ = msda_forward_ref(inst.pyramid, inst.sampling, inst.cfg)
        gv = msda_backward_ref(inst.pyramid, inst.sampling, inst.cfg, inst.grad_output).grad_value
        lhs = float(np.sum(inst.grad_output.astype(np.float64) * out))
        rhs = float(np.sum(gv.astype(np.float64) * inst.pyramid.storage))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))
    ok = worst <= 1e-5
    record(3, "adjoint identity", ok, f"50 instances, worst rel gap {worst:.2e} (tol 1e-5)")
    assert ok


def test_4_determinism():
    identical = True
    worst = 0.0
    for seed in range(10):
        inst = random_instance(seed, dtype="f32")
        args = (inst.pyramid, inst.sampling, inst.cfg)
        by_workers = {}
        for w in (1, 2, 8):
            flags = OptFlags(workers=w)
            a = msda_backward_opt(*args, flags, inst.grad_output)
            b = msda_backward_opt(*args, flags, inst.grad_output)
            for name in ("grad_value", "grad_locations", "grad_weights"):
                identical &= bool(np.array_equal(getattr(a, name), getattr(b, name)))
            by_workers[w] = a
        for w in (2, 8):
            for name in ("grad_value", "grad_locations", "grad_weights"):
                worst = max(worst, max_rel_error(getattr(by_workers[w], name), getattr(by_workers[1], name))[0])
    ok = identical and worst <= 1e-5
    record(4, "determinism", ok,
           f"staggered backward bit-identical across reruns: {identical}; "
           f"workers 1/2/8 worst rel {worst:.2e} (tol 1e-5)")
    assert ok


def test_5_boundary_sweep():
    cfg, p, s, g = _boundary_instance(width=256)
    base = OptFlags(workers=2)
    same = True
    for flags in (base, base.without("adaptive_veclen")):
        fused, _ = msda_forward_opt(p, s, cfg, flags)
        plain, _ = msda_forward_opt(p, s, cfg, flags.without("gather_fusion"))
        same &= bool(np.array_equal(fused, plain))
    ref, _ = msda_forward_ref(p, s, cfg)
    err = max_rel_error(fused, ref)[0]
    ok = same and err <= 1e-5
    record(5, "boundary sweep", ok,
           f"w0 = -1..255 on a 256-wide level: fused == unfused bitwise: {same}; vs reference rel {err:.2e}")
    assert ok


@pytest.fixture(scope="module")
def paper_problems():
    return {mode: make_problem(paper_config(mode), seed=0) for mode in Mode}


def test_6_direction_of_effect(paper_problems):
    assert TIMING_WORKERS >= 8 and TIMING_REPEATS >= 10
    inf = paper_problems[Mode.INFERENCE]
    rows = bench(inf, TIMING_REPEATS, TIMING_WORKERS, warmup=1)
    med = {(r.impl, r.direction): r.timing.median for r in rows}
    faster = {d: med[("optimized", d)] <= (1 + SLACK) * med[("reference", d)] for d in ("forward", "backward")}

    tables = [ablate_forward(paper_problems[m], TIMING_REPEATS, TIMING_WORKERS) for m in (Mode.INFERENCE, Mode.TRAIN)]
    tables.append(ablate_backward(inf, TIMING_REPEATS, TIMING_WORKERS))
    no_speedup = all(r.ratio >= 1 - SLACK for t in tables for r in t)
    all_slowest = True
    for t in tables[:2]:
        worst = t[-1].timing.median
        all_slowest &= all(worst >= (1 - SLACK) * r.timing.median for r in t)

    ratios = "; ".join(f"{t[0].table}: " + ", ".join(f"{r.variant} {r.ratio:.3f}" for r in t) for t in tables)
    ok = all(faster.values()) and no_speedup and all_slowest
    record(6, "direction of effect", ok,
           f"paper config, {TIMING_WORKERS} workers on {default_workers()} cpu(s), median of {TIMING_REPEATS}; "
           f"fwd opt/ref {med[('optimized', 'forward')]:.2f}/{med[('reference', 'forward')]:.2f}s, "
           f"bwd opt/ref {med[('optimized', 'backward')]:.2f}/{med[('reference', 'backward')]:.2f}s; "
           f"no toggle speeds up its pass: {no_speedup}; -All slowest forward: {all_slowest}; ratios {ratios}")
    assert ok


def test_7_microbenchmark_directions():
    gather = membench.sweep(membench.standard_grid(BenchKind.GATHER_CACHE))
    scatter = membench.sweep(membench.standard_grid(BenchKind.SCATTER_ADD))
    gmem = membench.sweep(membench.grid(BenchKind.GATHER_MEM, (1, 2), membench.STANDARD_SIZES, (1,)))
    checks_ok = all(r.checksum_ok and r.error is None for r in gather + scatter + gmem)

    bw = {(r.spec.group, r.spec.working_set_bytes, r.spec.workers): r.bandwidth for r in gather}
    sizes, workers = membench.STANDARD_SIZES, membench.STANDARD_WORKERS
    pair = all(bw[(2, s, w)] > (1 - SLACK) * bw[(1, s, w)] for s in sizes for w in workers)
    shrink = all(bw[(g, b, w)] <= (1 + SLACK) * bw[(g, a, w)]
                 for g in (1, 2) for w in workers for a, b in zip(sizes, sizes[1:]))
    per = {(r.spec.group, r.spec.working_set_bytes, r.spec.workers): r.per_worker_bandwidth for r in scatter}
    contention = all(per[(g, s, b)] <= (1 + SLACK) * per[(g, s, a)]
                     for g in (1, 2) for s in sizes for a, b in zip(workers, workers[1:]))
    ok = checks_ok and pair and shrink and contention
    gain = np.median([bw[(2, s, w)] / bw[(1, s, w)] for s in sizes for w in workers])
    record(7, "microbenchmark directions", ok,
           f"pair gather > single: {pair} (median gain {gain:.2f}x); gather non-increasing in working set: {shrink}; "
           f"per-worker scatter non-increasing in workers: {contention}; "
           f"{len(gather + scatter + gmem)} cells, checksums valid: {checks_ok}")
    assert ok


def test_8_train_mode_contract():
    worst = 0.0
    for seed in range(20):
        inst = random_instance(seed, mode="train")
        args = (inst.pyramid, inst.sampling, inst.cfg)
        for flags in (OptFlags(workers=2), OptFlags(workers=2).without("staggered_write", "scatter_fusion")):
            _, saved = msda_forward_opt(*args, flags)
            a = msda_backward_opt(*args, flags, inst.grad_output, saved)
            b = msda_backward_opt(*args, flags, inst.grad_output)
            for name in ("grad_value", "grad_locations", "grad_weights"):
                worst = max(worst, max_rel_error(getattr(a, name), getattr(b, name))[0])
    smaller = True
    chunks = []
    for flags in OptFlags.all_combinations():
        train = plan(paper_config(Mode.TRAIN), flags).chunk_points
        inference = plan(paper_config(Mode.INFERENCE), flags).chunk_points
        smaller &= all(t < i for t, i in zip(train, inference))
        if flags.label() == "default":
            chunks = (train, inference)
    ok = worst <= 1e-6 and smaller
    record(8, "train-mode contract", ok,
           f"saved vs recompute worst rel {worst:.2e} (tol 1e-6); train < inference chunk at every level "
           f"for all 16 flag sets: {smaller} (default train {chunks[0]}, inference {chunks[1]})")
    assert ok
