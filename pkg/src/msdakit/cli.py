"""Command-line entry point: verify | bench | ablate | membench.

Exit codes: 0 success, 1 a check failed, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import bench as benchlib
from . import membench
from .errors import MsdaError
from .optimized import OptFlags, msda_backward_opt
from .optimized.plan import default_workers
from .reference import Mode, grad_check
from .suite import corrupted_backward, oracle_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

VERIFY_PRESETS = {"full": (200, 100), "quick": (20, 10)}  # (instances, grad-check seeds)
MEMBENCH_PRESETS = ("standard",)
PRESETS = {"verify": tuple(VERIFY_PRESETS), "bench": benchlib.PRESETS, "ablate": benchlib.PRESETS,
           "membench": MEMBENCH_PRESETS}

# key -> converter; the config file and the flags share these names
KEYS = {
    "seed": int,
    "workers": int,
    "preset": str,
    "repeats": int,
    "mode": str,
    "out": str,
    "instances": int,
    "grad_seeds": int,
    "warmup": int,
    "kind": str,
    "groups": lambda v: _int_list(v),
    "working_sets": lambda v: _int_list(v),
    "worker_counts": lambda v: _int_list(v),
    "accesses": int,
    "element_bytes": int,
    "float_adds": lambda v: _bool(v),
}

DEFAULTS = {
    "verify": {"seed": 0, "preset": "full", "workers": 0},
    "bench": {"seed": 0, "preset": "small", "repeats": 10, "mode": "inference", "workers": 0},
    "ablate": {"seed": 0, "preset": "small", "repeats": 10, "workers": 0},
    "membench": {"seed": 0, "preset": "standard", "repeats": membench.DEFAULT_REPEATS,
                 "warmup": membench.DEFAULT_WARMUP, "kind": "gather_cache",
                 "accesses": 1 << 18, "element_bytes": 4, "float_adds": False},
}


class UsageError(Exception):
    pass


def _int_list(v: str) -> list[int]:
    return [int(x) for x in v.replace(",", " ").split()]


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def load_config(path: str) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Unknown or repeated keys are errors."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(p.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw.strip()!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        if key in out:
            raise UsageError(f"{path}:{n}: duplicate key {key!r}")
        try:
            out[key] = KEYS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config:
        cfg.update(load_config(args.config))
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if not cfg.get("workers"):
        cfg["workers"] = default_workers()
    if cfg["workers"] < 1:
        raise UsageError(f"workers must be >= 1, got {cfg['workers']}")
    if "repeats" in cfg and cfg["repeats"] < 1:
        raise UsageError(f"repeats must be >= 1, got {cfg['repeats']}")
    allowed = PRESETS[args.command]
    if cfg["preset"] not in allowed:
        raise UsageError(f"unknown {args.command} preset {cfg['preset']!r}; choose from {', '.join(allowed)}")
    if "mode" in cfg and cfg["mode"] not in ("inference", "train"):
        raise UsageError(f"mode must be inference or train, got {cfg['mode']!r}")
    return cfg


# -- output ------------------------------------------------------------------

def markdown_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [[str(h) for h in headers]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([fmt(cells[0]), sep] + [fmt(r) for r in cells[1:]])


def echo_config(command: str, cfg: dict, out) -> None:
    print(f"## {command}: resolved config", file=out)
    for k in sorted(cfg):
        v = cfg[k]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        print(f"{k} = {v}", file=out)
    print(file=out)


def write_csv(path: Optional[str], header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _ms(x: float) -> str:
    return f"{x * 1e3:.3f}"


# -- commands ----------------------------------------------------------------

def cmd_verify(cfg: dict, out, fault: bool = False) -> int:
    n_inst, n_grad = VERIFY_PRESETS[cfg["preset"]]
    n_inst = cfg.get("instances", n_inst)
    n_grad = cfg.get("grad_seeds", n_grad)
    seed = cfg["seed"]
    backward = corrupted_backward if fault else msda_backward_opt
    results = oracle_suite(range(seed, seed + n_inst), backward=backward, workers=cfg["workers"])

    rows, ok = [], True
    for name in ("output", "saved", "grad_value", "grad_locations", "grad_weights"):
        mine = [r for r in results if r.tensor == name]
        if not mine:
            continue
        worst = max(mine, key=lambda r: r.error / r.tol)
        fails = sum(not r.passed for r in mine)
        ok &= fails == 0
        rows.append(["oracle", name, len(mine), fails, f"{worst.error:.3e}", f"{worst.tol:.0e}",
                     f"seed={worst.seed} {worst.flags} idx={worst.worst_index}"])

    flags = OptFlags(workers=cfg["workers"])

    def opt_backward(p, s, c, g):
        return backward(p, s, c, flags, g)

    for label, bwd in (("grad_check ref", None), ("grad_check opt", opt_backward)):
        reports = [grad_check(seed=sd, backward=bwd) for sd in range(seed, seed + n_grad)]
        for name in ("grad_value", "grad_locations", "grad_weights"):
            checks = [(r.seed, r.by_name(name)) for r in reports]
            fails = sum(not c.passed for _, c in checks)
            wseed, worst = max(checks, key=lambda t: t[1].max_rel)
            ok &= fails == 0
            rows.append([label, name, len(checks), fails, f"{worst.max_rel:.3e}", "1e-03",
                         f"seed={wseed} idx={worst.worst_index}"])

    print(markdown_table(["check", "tensor", "cases", "failures", "worst_rel", "tol", "worst_at"], rows), file=out)
    print(f"\nverify: {'PASS' if ok else 'FAIL'}", file=out)
    if cfg.get("out"):
        write_csv(cfg["out"], ["check", "tensor", "cases", "failures", "worst_rel", "tol", "worst_at"], rows)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(cfg: dict, out) -> int:
    problem = benchlib.make_problem(benchlib.preset_config(cfg["preset"], Mode(cfg["mode"])), cfg["seed"])
    rows = benchlib.bench(problem, cfg["repeats"], cfg["workers"])
    med = {(r.impl, r.direction): r.timing.median for r in rows}
    table = [[r.impl, r.direction, _ms(r.timing.median), _ms(r.timing.mad), len(r.timing.samples)] for r in rows]
    print(markdown_table(["impl", "pass", "median_ms", "mad_ms", "runs"], table), file=out)
    for d in ("forward", "backward"):
        print(f"{d} speedup: {med[('reference', d)] / med[('optimized', d)]:.2f}x", file=out)
    header = ["preset", "mode", "impl", "pass", "workers", "repeats", "median_seconds", "mad_seconds"]
    csv_rows = [[cfg["preset"], cfg["mode"], r.impl, r.direction, cfg["workers"], cfg["repeats"],
                 f"{r.timing.median:.9g}", f"{r.timing.mad:.9g}"] for r in rows]
    text = write_csv(cfg.get("out"), header, csv_rows)
    if not cfg.get("out"):
        print("\n" + text, end="", file=out)
    return EXIT_OK


def cmd_ablate(cfg: dict, out) -> int:
    rows = benchlib.ablate(cfg["preset"], cfg["repeats"], cfg["workers"], cfg["seed"])
    table = [[r.table, r.variant, _ms(r.timing.median), _ms(r.timing.mad), f"{r.ratio:.2f}",
              "faster than Default" if r.faster_than_default else ""] for r in rows]
    print(markdown_table(["table", "variant", "median_ms", "mad_ms", "ratio", "note"], table), file=out)
    header = ["table", "variant", "workers", "repeats", "median_seconds", "mad_seconds", "ratio"]
    csv_rows = [[r.table, r.variant, cfg["workers"], cfg["repeats"], f"{r.timing.median:.9g}",
                 f"{r.timing.mad:.9g}", f"{r.ratio:.4f}"] for r in rows]
    text = write_csv(cfg.get("out"), header, csv_rows)
    if not cfg.get("out"):
        print("\n" + text, end="", file=out)
    return EXIT_OK


def membench_grid(cfg: dict) -> list[membench.BenchSpec]:
    groups = cfg.get("groups", [1, 2])
    sizes = cfg.get("working_sets", list(membench.STANDARD_SIZES))
    workers = cfg.get("worker_counts", list(membench.STANDARD_WORKERS))
    return membench.grid(cfg["kind"], groups, sizes, workers, seed=cfg["seed"], accesses=cfg["accesses"],
                         element_bytes=cfg["element_bytes"], float_adds=cfg["float_adds"])


def cmd_membench(cfg: dict, out) -> int:
    specs = membench_grid(cfg)
    reports = membench.sweep(specs, warmup=cfg["warmup"], repeats=cfg["repeats"])
    table = [[r.spec.kind.value, r.spec.group, r.spec.working_set_bytes, r.spec.workers,
              f"{r.elapsed * 1e3:.3f}", f"{r.bandwidth / 1e9:.3f}", f"{r.per_worker_bandwidth / 1e9:.3f}",
              r.checksum_ok, r.error or ""] for r in reports]
    print(markdown_table(["kind", "group", "working_set_bytes", "workers", "median_ms", "GB/s",
                          "GB/s per worker", "checksum_ok", "error"], table), file=out)
    text = membench.to_csv(reports, cfg.get("out"))
    if not cfg.get("out"):
        print("\n" + text, end="", file=out)
    return EXIT_OK if all(r.checksum_ok for r in reports) else EXIT_FAIL


COMMANDS = {"verify": cmd_verify, "bench": cmd_bench, "ablate": cmd_ablate, "membench": cmd_membench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdakit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "verify": "optimized-vs-reference equivalence (all 16 flag combinations) and gradient checks",
        "bench": "reference vs optimized forward/backward wall time",
        "ablate": "ablation matrix: forward inference, forward train, backward",
        "membench": "gather / scatter-add microbenchmark sweep",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="worker threads (default: available CPUs)")
        p.add_argument("--preset", help={"verify": "full | quick", "membench": "standard"}.get(name, "paper | small"))
        p.add_argument("--repeats", type=int, help="timed runs per measurement")
        p.add_argument("--mode", choices=("inference", "train"))
        p.add_argument("--out", help="CSV output path")
        p.add_argument("--config", help="key=value config file; flags override it")
        if name == "verify":
            p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        cfg = resolve(args)
        echo_config(args.command, cfg, out)
        if args.command == "verify":
            return cmd_verify(cfg, out, fault=args.inject_fault)
        return COMMANDS[args.command](cfg, out)
    except (UsageError, MsdaError) as exc:
        print(f"msdakit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
