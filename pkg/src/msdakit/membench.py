"""Gather / scatter-add microbenchmarks.

Measures random-index gather and scatter-add throughput against three axes:
access granularity (1 element vs a merged adjacent pair), working-set size
(cache-resident vs memory-resident), and the number of concurrent writers on
a shared destination. Every run carries a checksum that is re-derived by a
sequential numpy replay, so a fast-but-wrong kernel cannot produce a data point.
"""

from __future__ import annotations

import csv
import enum
import io
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from numba import njit

from .atomics import atomic_add, atomic_add_pair_f32, atomic_add_pair_i32, load_pair_sum
from .errors import InputError

MIN_ACCESSES = 100_000
DEFAULT_WARMUP = 3
DEFAULT_REPEATS = 10
EVICT_BYTES = 64 << 20  # streamed between runs for memory-resident gathers
RING_SIZE = 1 << 15  # random indices per worker, cycled
SCATTER_CONSTANT = 1
CSV_COLUMNS = ("kind", "group", "working_set_bytes", "workers", "median_seconds", "bandwidth_bps", "checksum_ok")

_GATHER_TYPES = {2: np.uint16, 4: np.uint32, 8: np.uint64}


class BenchKind(enum.Enum):
    GATHER_CACHE = "gather_cache"
    GATHER_MEM = "gather_mem"
    SCATTER_ADD = "scatter_add"

    @classmethod
    def parse(cls, name: Union[str, "BenchKind"]) -> "BenchKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"gathercacheresident": "gather_cache", "gathermemresident": "gather_mem",
                   "scatteradd": "scatter_add", "scatter": "scatter_add"}
        key = aliases.get(key.replace("_", ""), key)
        try:
            return cls(key)
        except ValueError:
            raise InputError(f"unknown benchmark kind {name!r}") from None

    @property
    def is_gather(self) -> bool:
        return self is not BenchKind.SCATTER_ADD


@dataclass(frozen=True)
class BenchSpec:
    kind: BenchKind
    element_bytes: int = 4
    group: int = 1
    working_set_bytes: int = 64 * 64 * 4
    accesses: int = 1 << 18  # per worker
    workers: int = 1
    seed: int = 0
    float_adds: bool = False  # scatter only: f32 adds instead of exact integer adds
    inner_batch: int = 0  # indices handed out per block; 0 = all at once

    def __post_init__(self):
        object.__setattr__(self, "kind", BenchKind.parse(self.kind))
        if self.group not in (1, 2):
            raise InputError(f"group must be 1 or 2, got {self.group}")
        if self.accesses < MIN_ACCESSES:
            raise InputError(f"accesses must be >= {MIN_ACCESSES} for stable timing, got {self.accesses}")
        if self.workers < 1:
            raise InputError(f"workers must be >= 1, got {self.workers}")
        if self.inner_batch < 0:
            raise InputError(f"inner_batch must be >= 0, got {self.inner_batch}")
        if self.kind.is_gather:
            if self.element_bytes not in _GATHER_TYPES:
                raise InputError(f"gather element_bytes must be 2, 4 or 8, got {self.element_bytes}")
        elif self.element_bytes != 4:
            raise InputError(f"scatter-add supports 4-byte elements only, got {self.element_bytes}")
        if self.elements < 2 * self.group:
            raise InputError(f"working set of {self.working_set_bytes} B is too small for group {self.group}")

    @property
    def elements(self) -> int:
        return self.working_set_bytes // self.element_bytes

    @property
    def bytes_moved(self) -> int:
        return self.workers * self.accesses * self.group * self.element_bytes


@dataclass
class BenchReport:
    spec: BenchSpec
    elapsed: float  # median over timed runs
    bytes_moved: int
    bandwidth: float
    per_worker: list[float]  # seconds per worker, from the median run
    checksum: int
    expected_checksum: int
    checksum_ok: bool
    samples: list[float] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def per_worker_bandwidth(self) -> float:
        return self.bandwidth / self.spec.workers

    def csv_row(self) -> dict:
        return {
            "kind": self.spec.kind.value,
            "group": self.spec.group,
            "working_set_bytes": self.spec.working_set_bytes,
            "workers": self.spec.workers,
            "median_seconds": f"{self.elapsed:.9g}",
            "bandwidth_bps": f"{self.bandwidth:.6g}",
            "checksum_ok": str(self.checksum_ok).lower(),
        }


# -- kernels -----------------------------------------------------------------

# Workers cycle through a fixed ring of random indices. A ring of RING_SIZE
# uint32 entries (128 KB) stays cache-resident, so the index stream is a small
# constant cost rather than a DRAM stream that would mask the working-set effect.
# Each slice is walked with a plain ``range(n)``: with ``range(lo, hi)`` numba
# cannot prove the index non-negative and the loop runs about 2x slower.

@njit(nogil=True, cache=True)
def _gather_slice(data, v, group):
    s = 0
    if group == 1:
        for i in range(v.size):
            s += np.int64(data[v[i]])
    else:
        for i in range(v.size):
            s += load_pair_sum(data, v[i])
    return s


@njit(nogil=True, cache=True)
def _scatter_int_slice(dst, words, v, group, value):
    if group == 1:
        for i in range(v.size):
            atomic_add(dst, v[i], value)
    else:
        for i in range(v.size):
            atomic_add_pair_i32(words, v[i] >> np.uint32(1), value, value)


@njit(nogil=True, cache=True)
def _scatter_f32_slice(dst, words, v, group, value):
    if group == 1:
        for i in range(v.size):
            atomic_add(dst, v[i], value)
    else:
        for i in range(v.size):
            atomic_add_pair_f32(words, v[i] >> np.uint32(1), value, value)


@njit(nogil=True, cache=True)
def _gather(data, ring, lo, hi, group):
    """Sum of the elements at logical accesses ``lo..hi`` of the cycled ring."""
    s = 0
    pos = lo % ring.size
    left = hi - lo
    while left > 0:
        take = min(left, ring.size - pos)
        s += _gather_slice(data, ring[pos:pos + take], group)
        left -= take
        pos = 0
    return s


@njit(nogil=True, cache=True)
def _scatter_int(dst, words, ring, lo, hi, group, value):
    pos = lo % ring.size
    left = hi - lo
    while left > 0:
        take = min(left, ring.size - pos)
        _scatter_int_slice(dst, words, ring[pos:pos + take], group, value)
        left -= take
        pos = 0
    return 0


@njit(nogil=True, cache=True)
def _scatter_f32(dst, words, ring, lo, hi, group, value):
    pos = lo % ring.size
    left = hi - lo
    while left > 0:
        take = min(left, ring.size - pos)
        _scatter_f32_slice(dst, words, ring[pos:pos + take], group, value)
        left -= take
        pos = 0
    return 0


# -- workload ----------------------------------------------------------------

@dataclass
class _Workload:
    spec: BenchSpec
    data: np.ndarray
    indices: list[np.ndarray]  # one index ring per worker


def _prepare(spec: BenchSpec) -> _Workload:
    rng = np.random.default_rng(spec.seed)
    n = spec.elements
    ring = min(spec.accesses, RING_SIZE)
    if spec.kind.is_gather:
        dt = _GATHER_TYPES[spec.element_bytes]
        data = rng.integers(0, 1 << min(8 * spec.element_bytes, 32), size=n, dtype=np.uint64).astype(dt)
        hi = n - spec.group + 1
        indices = [rng.integers(0, hi, size=ring, dtype=np.uint32) for _ in range(spec.workers)]
    else:
        data = np.zeros(n - (n % 2), np.float32 if spec.float_adds else np.int32)
        if spec.group == 1:
            indices = [rng.integers(0, data.size, size=ring, dtype=np.uint32)
                       for _ in range(spec.workers)]
        else:
            # pair starts are even so each pair is one aligned 64-bit word
            indices = [2 * rng.integers(0, data.size // 2, size=ring, dtype=np.uint32)
                       for _ in range(spec.workers)]
    return _Workload(spec, data, indices)


def _blocks(spec: BenchSpec) -> list[tuple[int, int]]:
    step = spec.inner_batch or spec.accesses
    return [(lo, min(spec.accesses, lo + step)) for lo in range(0, spec.accesses, step)]


def _expected_checksum(w: _Workload) -> int:
    """Sequential numpy replay of the whole run."""
    spec = w.spec
    if spec.kind.is_gather:
        total = 0
        for ring in w.indices:
            i = np.resize(ring, spec.accesses).astype(np.int64)
            total += int(w.data[i].astype(np.int64).sum())
            if spec.group == 2:
                total += int(w.data[i + 1].astype(np.int64).sum())
        return total
    return spec.workers * spec.accesses * spec.group * SCATTER_CONSTANT


def _replay_destination(w: _Workload) -> np.ndarray:
    """Per-element totals a sequential scatter of every worker's stream would leave."""
    counts = np.zeros(w.data.size, np.int64)
    for ring in w.indices:
        idx = np.resize(ring, w.spec.accesses)
        counts += np.bincount(idx, minlength=w.data.size)
        if w.spec.group == 2:
            counts += np.bincount(idx + 1, minlength=w.data.size)
    return counts * SCATTER_CONSTANT


def _evict() -> None:
    buf = np.ones(EVICT_BYTES // 8, np.int64)
    buf.sum()


def _execute(w: _Workload) -> tuple[float, list[float], int]:
    """One timed run; returns ``(elapsed, per-worker seconds, checksum)``."""
    spec = w.spec
    blocks = _blocks(spec)
    if spec.kind is BenchKind.GATHER_CACHE:
        w.data.sum()  # touch the working set and the index rings
        for ring in w.indices:
            ring.sum()
    elif spec.kind is BenchKind.GATHER_MEM:
        _evict()
    else:
        w.data[:] = 0
    words = w.data.view(np.uint64) if not spec.kind.is_gather else None
    value = np.float32(SCATTER_CONSTANT) if spec.float_adds else np.int32(SCATTER_CONSTANT)
    kernel = _scatter_f32 if spec.float_adds else _scatter_int

    sums = [0] * spec.workers
    starts = [0.0] * spec.workers
    ends = [0.0] * spec.workers
    barrier = threading.Barrier(spec.workers)

    def work(i: int) -> None:
        idx = w.indices[i]
        barrier.wait()
        t0 = time.perf_counter()
        s = 0
        for lo, hi in blocks:
            if spec.kind.is_gather:
                s += _gather(w.data, idx, lo, hi, spec.group)
            else:
                kernel(w.data, words, idx, lo, hi, spec.group, value)
        ends[i] = time.perf_counter()
        starts[i] = t0
        sums[i] = s

    if spec.workers == 1:
        work(0)
    else:
        threads = [threading.Thread(target=work, args=(i,)) for i in range(spec.workers)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = max(ends) - min(starts)
    per_worker = [e - s for s, e in zip(starts, ends)]
    if spec.kind.is_gather:
        checksum = sum(sums)
    elif spec.float_adds:
        checksum = int(round(float(w.data.astype(np.float64).sum())))
    else:
        checksum = int(w.data.astype(np.int64).sum())
    return elapsed, per_worker, checksum


def _checksum_ok(spec: BenchSpec, got: int, want: int) -> bool:
    if spec.kind is BenchKind.SCATTER_ADD and spec.float_adds:
        return abs(got - want) <= 1e-3 * abs(want)
    return got == want


class _Cell:
    """One spec's workload plus its accumulated timed runs."""

    def __init__(self, spec: BenchSpec):
        self.spec = spec
        self.work = _prepare(spec)
        self.want = _expected_checksum(self.work)
        self.exact = spec.kind is BenchKind.SCATTER_ADD and not spec.float_adds
        self.replay = _replay_destination(self.work) if self.exact else None
        self.runs: list[tuple[float, list[float], int]] = []
        self.ok = True

    def warm(self) -> None:
        _execute(self.work)

    def step(self) -> None:
        r = _execute(self.work)
        self.runs.append(r)
        self.ok &= _checksum_ok(self.spec, r[2], self.want)
        if self.exact:
            self.ok &= bool(np.array_equal(self.work.data, self.replay))

    def report(self) -> BenchReport:
        spec = self.spec
        times = [r[0] for r in self.runs]
        med = statistics.median(times)
        mid = min(self.runs, key=lambda r: abs(r[0] - med))
        return BenchReport(spec, med, spec.bytes_moved, spec.bytes_moved / med, mid[1], self.runs[-1][2],
                           self.want, self.ok, times)


def _check_counts(warmup: int, repeats: int) -> None:
    if repeats < 1 or warmup < 0:
        raise InputError(f"need repeats >= 1 and warmup >= 0, got {repeats}, {warmup}")


def run(spec: BenchSpec, warmup: int = 0, repeats: int = 1) -> BenchReport:
    """Run ``warmup`` discarded and ``repeats`` timed executions of ``spec``."""
    _check_counts(warmup, repeats)
    cell = _Cell(spec)
    for _ in range(warmup):
        cell.warm()
    for _ in range(repeats):
        cell.step()
    return cell.report()


def run_gather(spec: BenchSpec, warmup: int = 0, repeats: int = 1) -> BenchReport:
    if not spec.kind.is_gather:
        raise InputError(f"run_gather needs a gather kind, got {spec.kind.value}")
    return run(spec, warmup, repeats)


def run_scatter_add(spec: BenchSpec, warmup: int = 0, repeats: int = 1) -> BenchReport:
    if spec.kind is not BenchKind.SCATTER_ADD:
        raise InputError(f"run_scatter_add needs kind scatter_add, got {spec.kind.value}")
    return run(spec, warmup, repeats)


def _failed(spec: BenchSpec, exc: Exception) -> BenchReport:
    nan = float("nan")
    return BenchReport(spec, nan, spec.bytes_moved, nan, [], 0, 0, False, [], f"{type(exc).__name__}: {exc}")


def sweep(specs: Iterable[BenchSpec], warmup: int = DEFAULT_WARMUP,
          repeats: int = DEFAULT_REPEATS) -> list[BenchReport]:
    """Run every cell, interleaving the timed runs round-robin across cells so a
    burst of machine noise lands on all of them alike (each run is well under a
    millisecond). A failing cell yields a report with ``error`` set instead of aborting."""
    _check_counts(warmup, repeats)
    specs = list(specs)
    cells: list[Optional[_Cell]] = []
    errors: dict[int, BenchReport] = {}

    def guard(i: int, fn) -> None:
        try:
            fn()
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            errors[i] = _failed(specs[i], exc)
            cells[i] = None

    for i, spec in enumerate(specs):
        cells.append(None)
        guard(i, lambda: cells.__setitem__(i, _Cell(spec)))
    for _ in range(warmup):
        for i, c in enumerate(cells):
            if c is not None:
                guard(i, c.warm)
    for _ in range(repeats):
        for i, c in enumerate(cells):
            if c is not None:
                guard(i, c.step)
    return [errors[i] if c is None else c.report() for i, c in enumerate(cells)]


def grid(kind, groups: Sequence[int], working_sets: Sequence[int], workers: Sequence[int],
         **common) -> list[BenchSpec]:
    return [BenchSpec(kind, group=g, working_set_bytes=ws, workers=n, **common)
            for g in groups for ws in working_sets for n in workers]


STANDARD_SIZES = (64 * 64 * 4, 128 * 128 * 4, 256 * 256 * 4)
STANDARD_WORKERS = (1, 4, 16)


def standard_grid(kind=BenchKind.GATHER_CACHE, seed: int = 0, accesses: int = 1 << 18) -> list[BenchSpec]:
    """Granularity x feature-map size x worker-count grid: 2 x 3 x 3 = 18 cells."""
    return grid(kind, (1, 2), STANDARD_SIZES, STANDARD_WORKERS, seed=seed, accesses=accesses)


def to_csv(reports: Sequence[BenchReport], sink=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.csv_row())
    text = buf.getvalue()
    if sink is not None:
        Path(sink).write_text(text)
    return text


def spec_dict(spec: BenchSpec) -> dict:
    d = asdict(spec)
    d["kind"] = spec.kind.value
    return d


def with_seed(specs: Iterable[BenchSpec], seed: int) -> list[BenchSpec]:
    return [replace(s, seed=seed) for s in specs]
