import csv
import io
import subprocess
import sys

import pytest

from msdakit import cli, membench


def run(argv):
    buf = io.StringIO()
    code = cli.main(argv, buf)
    return code, buf.getvalue()


@pytest.fixture
def quick(tmp_path):
    path = tmp_path / "verify.cfg"
    path.write_text("# tiny verify run\npreset = quick\ninstances = 3\ngrad_seeds = 2\nworkers = 2\n")
    return str(path)


def test_verify_passes(quick):
    code, text = run(["verify", "--config", quick])
    assert code == 0
    assert "verify: PASS" in text
    assert "grad_check opt" in text and "grad_check ref" in text


def test_verify_fault_injection_fails(quick):
    code, text = run(["verify", "--config", quick, "--inject-fault"])
    assert code == 1
    assert "verify: FAIL" in text


def test_verify_csv(quick, tmp_path):
    out = tmp_path / "v.csv"
    assert run(["verify", "--config", quick, "--out", str(out)])[0] == 0
    rows = list(csv.DictReader(out.open()))
    assert {r["tensor"] for r in rows} >= {"output", "grad_value", "grad_locations", "grad_weights"}
    assert all(r["failures"] == "0" for r in rows)


def test_resolved_config_echoed_and_flags_override(quick):
    code, text = run(["verify", "--config", quick, "--seed", "5"])
    assert code == 0
    head = text.split("\n\n", 1)[0]
    assert "seed = 5" in head and "instances = 3" in head and "workers = 2" in head


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("speed = 3\n")
    assert run(["verify", "--config", str(bad)])[0] == 2


@pytest.mark.parametrize("body", ["seed = 1\nseed = 2\n", "seed = x\n", "just words\n"])
def test_malformed_config(tmp_path, body):
    bad = tmp_path / "bad.cfg"
    bad.write_text(body)
    assert run(["bench", "--config", str(bad)])[0] == 2


def test_missing_config_file(tmp_path):
    assert run(["membench", "--config", str(tmp_path / "nope.cfg")])[0] == 2


@pytest.mark.parametrize("argv", [
    ["bench", "--preset", "huge"],
    ["ablate", "--preset", "quick"],
    ["verify", "--preset", "paper"],
    ["membench", "--preset", "small"],
    ["bench", "--mode", "eval"],
    ["bench", "--repeats", "0"],
    ["bench", "--workers", "-1"],
    ["frobnicate"],
    [],
])
def test_usage_errors(argv):
    assert run(argv)[0] == 2


def test_help_exits_zero():
    assert run(["--help"])[0] == 0


def test_bench_small(tmp_path):
    out = tmp_path / "bench.csv"
    code, text = run(["bench", "--preset", "small", "--repeats", "1", "--workers", "2", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4
    assert {(r["impl"], r["pass"]) for r in rows} == {
        (i, d) for i in ("reference", "optimized") for d in ("forward", "backward")}
    assert "forward speedup" in text and "median_ms" in text


def test_bench_train_to_stdout():
    code, text = run(["bench", "--preset", "small", "--repeats", "1", "--mode", "train"])
    assert code == 0
    assert text.count("small,train,") == 4


def test_ablate_small(tmp_path):
    out = tmp_path / "ablate.csv"
    code, text = run(["ablate", "--preset", "small", "--repeats", "1", "--out", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 12
    assert [r["table"] for r in rows] == ["forward-inference"] * 4 + ["forward-train"] * 4 + ["backward"] * 4
    defaults = [r for r in rows if r["variant"] == "Default"]
    assert len(defaults) == 3 and all(float(r["ratio"]) == 1.0 for r in defaults)
    assert "-Staggered Write" in text and "-Adaptive VecLen" in text


def test_membench_grid_file(tmp_path):
    cfg = tmp_path / "grid.cfg"
    out = tmp_path / "mb.csv"
    cfg.write_text(f"kind = scatter_add\ngroups = 1,2\nworking_sets = 4096 16384\nworker_counts = 1\n"
                   f"accesses = {membench.MIN_ACCESSES}\nrepeats = 1\nwarmup = 0\nout = {out}\n")
    code, text = run(["membench", "--config", str(cfg)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(membench.CSV_COLUMNS)
    assert len(lines) == 5
    assert all(l.endswith(",true") for l in lines[1:])


def test_membench_bad_kind(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("kind = teleport\n")
    assert run(["membench", "--config", str(cfg)])[0] == 2


def test_membench_standard_preset_rows(monkeypatch):
    # the grid definition alone; timing the full sweep is left to the acceptance run
    args = cli.build_parser().parse_args(["membench"])
    assert len(cli.membench_grid(cli.resolve(args))) == 18


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "msdakit.cli", "bench", "--preset", "nope"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "unknown bench preset" in proc.stderr
