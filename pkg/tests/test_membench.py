import csv
import io

import pytest

from msdakit import membench
from msdakit.errors import InputError
from msdakit.membench import BenchKind, BenchSpec

FAST = dict(accesses=membench.MIN_ACCESSES)


def _run(**kw):
    kw = {**FAST, **kw}
    return membench.run(BenchSpec(**kw), warmup=1, repeats=3)


@pytest.mark.parametrize("kind", list(BenchKind))
@pytest.mark.parametrize("group", [1, 2])
def test_checksums_valid(kind, group):
    r = _run(kind=kind, group=group, workers=2)
    assert r.error is None
    assert r.checksum_ok, (r.checksum, r.expected_checksum)
    assert r.bandwidth > 0 and len(r.samples) == 3 and len(r.per_worker) == 2


@pytest.mark.parametrize("element_bytes", [2, 4, 8])
def test_gather_element_sizes(element_bytes):
    assert _run(kind=BenchKind.GATHER_CACHE, element_bytes=element_bytes).checksum_ok


def test_float_scatter_variant():
    r = _run(kind=BenchKind.SCATTER_ADD, group=2, workers=3, float_adds=True)
    assert r.checksum_ok


def test_scatter_conserves_total():
    spec = BenchSpec(BenchKind.SCATTER_ADD, group=2, workers=4, **FAST)
    r = membench.run(spec, repeats=1)
    assert r.checksum == spec.workers * spec.accesses * spec.group * membench.SCATTER_CONSTANT


def test_same_seed_same_checksum():
    a = _run(kind=BenchKind.GATHER_MEM, seed=7)
    b = _run(kind=BenchKind.GATHER_MEM, seed=7)
    c = _run(kind=BenchKind.GATHER_MEM, seed=8)
    assert a.checksum == b.checksum != c.checksum


def test_bytes_moved_accounting():
    spec = BenchSpec(BenchKind.GATHER_CACHE, group=2, workers=3, element_bytes=8, **FAST)
    assert spec.bytes_moved == 3 * membench.MIN_ACCESSES * 2 * 8


@pytest.mark.parametrize("bad", [
    dict(accesses=0),
    dict(accesses=membench.MIN_ACCESSES - 1),
    dict(group=3),
    dict(workers=0),
    dict(element_bytes=3),
    dict(kind=BenchKind.SCATTER_ADD, element_bytes=8),
    dict(working_set_bytes=4),
])
def test_invalid_specs(bad):
    kw = {"kind": BenchKind.GATHER_CACHE, **FAST, **bad}
    with pytest.raises(InputError):
        BenchSpec(**kw)


def test_kind_parse():
    assert BenchKind.parse("scatter_add") is BenchKind.SCATTER_ADD
    assert BenchKind.parse(BenchKind.GATHER_MEM) is BenchKind.GATHER_MEM
    with pytest.raises(InputError):
        BenchKind.parse("nope")


def test_wrong_runner_rejected():
    with pytest.raises(InputError):
        membench.run_gather(BenchSpec(BenchKind.SCATTER_ADD, **FAST))
    with pytest.raises(InputError):
        membench.run_scatter_add(BenchSpec(BenchKind.GATHER_CACHE, **FAST))
    with pytest.raises(InputError):
        membench.run(BenchSpec(BenchKind.GATHER_CACHE, **FAST), repeats=0)


def test_grid_csv():
    specs = membench.grid(BenchKind.GATHER_CACHE, [1, 2], [4096, 16384, 65536], [1], **FAST)
    reports = membench.sweep(specs, warmup=0, repeats=1)
    text = membench.to_csv(reports)
    rows = list(csv.DictReader(io.StringIO(text)))
    assert text.splitlines()[0] == ",".join(membench.CSV_COLUMNS)
    assert len(rows) == 6
    assert {(r["group"], r["working_set_bytes"]) for r in rows} == {
        (g, w) for g in ("1", "2") for w in ("4096", "16384", "65536")}
    assert all(r["checksum_ok"] == "true" for r in rows)


def test_csv_sink(tmp_path):
    out = tmp_path / "mb.csv"
    membench.to_csv([_run(kind=BenchKind.GATHER_CACHE)], out)
    assert out.read_text().count("\n") == 2


def test_standard_grid_has_18_cells():
    specs = membench.standard_grid()
    assert len(specs) == 18
    assert {s.group for s in specs} == {1, 2}
    assert len({s.working_set_bytes for s in specs}) == 3
    assert {s.workers for s in specs} == set(membench.STANDARD_WORKERS)


def test_failing_cell_does_not_abort_sweep(monkeypatch):
    specs = membench.grid(BenchKind.GATHER_CACHE, [1], [4096], [1, 2, 3], **FAST)
    real_prepare, real_execute = membench._prepare, membench._execute

    def prepare(spec):
        if spec.workers == 1:
            raise RuntimeError("boom")
        return real_prepare(spec)

    def execute(w):
        if w.spec.workers == 3:
            raise MemoryError("late")
        return real_execute(w)

    monkeypatch.setattr(membench, "_prepare", prepare)
    monkeypatch.setattr(membench, "_execute", execute)
    reports = membench.sweep(specs, warmup=0, repeats=2)
    assert [r.spec.workers for r in reports] == [1, 2, 3]
    assert reports[0].error and "boom" in reports[0].error and not reports[0].checksum_ok
    assert reports[1].error is None and reports[1].checksum_ok and len(reports[1].samples) == 2
    assert "MemoryError" in reports[2].error
    assert len(list(csv.DictReader(io.StringIO(membench.to_csv(reports))))) == 3


def test_accesses_beyond_ring():
    # more accesses than the index ring holds, not a multiple of it
    r = _run(kind=BenchKind.GATHER_CACHE, group=2, accesses=membench.RING_SIZE * 5 + 123)
    assert r.checksum_ok
    s = _run(kind=BenchKind.SCATTER_ADD, group=2, workers=2, accesses=membench.RING_SIZE * 4 + 7)
    assert s.checksum_ok


def test_inner_batch_blocks():
    r = _run(kind=BenchKind.SCATTER_ADD, workers=2, accesses=membench.MIN_ACCESSES + 11, inner_batch=9999)
    assert r.checksum_ok
    g = _run(kind=BenchKind.GATHER_MEM, group=2, inner_batch=4096)
    assert g.checksum_ok


def test_sweep_interleaves_runs(monkeypatch):
    order = []
    real = membench._execute

    def execute(w):
        order.append(w.spec.working_set_bytes)
        return real(w)

    monkeypatch.setattr(membench, "_execute", execute)
    membench.sweep(membench.grid(BenchKind.GATHER_CACHE, [1], [4096, 8192], [1], **FAST), warmup=1, repeats=2)
    assert order == [4096, 8192] * 3


def test_with_seed_and_spec_dict():
    specs = membench.with_seed(membench.standard_grid(), 5)
    assert all(s.seed == 5 for s in specs)
    assert membench.spec_dict(specs[0])["kind"] == "gather_cache"


# Directions of effect. Cells of one comparison go through ``sweep`` so their
# runs interleave; the machine's speed drifts too much to compare cells timed
# one after the other.

def _pair(vary, values, **kw):
    specs = [BenchSpec(**{**FAST, **kw, vary: v}) for v in values]
    return membench.sweep(specs, warmup=1, repeats=9)


def test_gather_wider_group_is_faster():
    for size in (16384, 262144):
        one, two = _pair("group", (1, 2), kind=BenchKind.GATHER_CACHE, working_set_bytes=size, accesses=1 << 20)
        assert two.bandwidth > one.bandwidth


def test_scatter_wider_group_is_faster():
    one, two = _pair("group", (1, 2), kind=BenchKind.SCATTER_ADD, working_set_bytes=65536, accesses=1 << 19)
    assert two.bandwidth > one.bandwidth


def test_gather_slows_beyond_l1():
    small, large = _pair("working_set_bytes", (16384, 262144), kind=BenchKind.GATHER_CACHE, accesses=1 << 20)
    assert large.bandwidth < small.bandwidth


def test_scatter_contention_lowers_per_worker_throughput():
    one, many = _pair("workers", (1, 4), kind=BenchKind.SCATTER_ADD, working_set_bytes=4096, accesses=1 << 19)
    assert many.per_worker_bandwidth < one.per_worker_bandwidth
