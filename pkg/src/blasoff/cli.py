"""Command-line front end.

Subcommands: replay, compare, gen, calibrate, inspect, run.  JSON files
are the machine hand-off; summaries and tables go to stdout, and the
optional --figures directory receives CSV tables plus rendered charts.

Exit codes: 0 success, 1 generic error, 2 trace missing/malformed,
3 unknown profile, 4 underdetermined calibration.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

from .costmodel import (
    CalibrationError,
    ProfileError,
    fit_profile,
    resolve_profile,
    strategy1_bytes,
)
from .model import Strategy
from .policy import (
    ConfigParseError,
    ENV_DEBUG,
    ENV_PAGE_SIZE,
    ENV_STRATEGY,
    ENV_THRESHOLD,
    ENV_TRACE,
    OffloadConfig,
    decide,
    parse_config,
)
from .replay import SynthSpec, SynthSpecError, compare, gen_synthetic, replay
from .traceio import Trace, TraceFormatError, dump_trace, load_trace

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_TRACE = 2
EXIT_PROFILE = 3
EXIT_UNDERDETERMINED = 4


def _strategy_code(text: str) -> Strategy:
    try:
        return Strategy.from_code(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _strategy_list(text: str) -> List[Strategy]:
    try:
        return [Strategy.from_code(token) for token in text.split(",")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _dims_triple(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must be m,n,k")
    try:
        dims = tuple(int(part) for part in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("dims must be integers") from None
    return dims


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blasoff",
        description="Replay, compare, generate, and record gemm offload traces.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_replay = sub.add_parser("replay", help="replay a trace under one strategy")
    p_replay.add_argument("--trace", required=True, help="trace file (JSON Lines)")
    p_replay.add_argument(
        "--strategy", type=_strategy_code, default=Strategy.from_code("3"),
        help="1, 2H, 2D or 3 (default 3)",
    )
    p_replay.add_argument("--profile", default="gh200", help="built-in name or JSON path")
    p_replay.add_argument("--threshold", type=float, default=None, help="offload threshold")
    p_replay.add_argument("--out", default=None, help="write the report JSON here")
    p_replay.add_argument("--figures", default=None, metavar="DIR",
                          help="also render CSV + charts into DIR")
    p_replay.set_defaults(func=cmd_replay)

    p_compare = sub.add_parser("compare", help="replay under several strategies")
    p_compare.add_argument("--trace", required=True)
    p_compare.add_argument("--strategies", type=_strategy_list,
                           default=_strategy_list("1,2H,2D,3"),
                           help="comma-separated codes (default 1,2H,2D,3)")
    p_compare.add_argument("--profile", default="gh200")
    p_compare.add_argument("--threshold", type=float, default=None)
    p_compare.add_argument("--out", default=None)
    p_compare.add_argument("--figures", default=None, metavar="DIR")
    p_compare.set_defaults(func=cmd_compare)

    p_gen = sub.add_parser("gen", help="generate a synthetic trace")
    p_gen.add_argument("--matrices", type=int, default=1, help="operand sets")
    p_gen.add_argument("--reuse", type=int, default=1, help="appearances per set")
    p_gen.add_argument("--dims", type=_dims_triple, required=True, help="m,n,k")
    p_gen.add_argument("--elem", type=int, default=8, choices=(4, 8, 16),
                       help="element bytes: 4=sgemm, 8=dgemm, 16=zgemm")
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--page-size", type=int, default=4096)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_cal = sub.add_parser("calibrate", help="fit a profile from measurements")
    p_cal.add_argument("--measurements", required=True, help="measurements JSON")
    p_cal.add_argument("--base", default=None,
                       help="start from this profile; fitted classes override it")
    p_cal.add_argument("--out", default=None, help="write profile JSON here (else stdout)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_inspect = sub.add_parser("inspect", help="summarize a trace or stats file")
    group = p_inspect.add_mutually_exclusive_group(required=True)
    group.add_argument("--trace", default=None)
    group.add_argument("--stats", default=None)
    p_inspect.add_argument("--threshold", type=float, default=None,
                           help="threshold for the would-offload count")
    p_inspect.set_defaults(func=cmd_inspect)

    p_run = sub.add_parser(
        "run", help="run a Python script with the BLAS interposer installed"
    )
    p_run.add_argument("--trace", default=None, help="record calls to this file")
    p_run.add_argument("--stats", default=None, help="write the exit stats JSON here")
    p_run.add_argument("--strategy", type=_strategy_code, default=None)
    p_run.add_argument("--threshold", type=float, default=None)
    p_run.add_argument("--debug", type=int, default=None, help="debug level 0..3")
    p_run.add_argument("script", help="Python script to execute")
    p_run.add_argument("args", nargs=argparse.REMAINDER, help="script arguments")
    p_run.set_defaults(func=cmd_run)

    return parser


def _config_for(ns: argparse.Namespace, trace: Trace) -> OffloadConfig:
    """Environment config, trace-header page size, then flag overrides."""
    cfg = parse_config(os.environ)
    if not os.environ.get(ENV_PAGE_SIZE):
        cfg = replace(cfg, page_size=trace.header.page_size)
    if ns.threshold is not None:
        cfg = cfg.with_threshold(ns.threshold)
    return cfg


def _write_json(path: str, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def _summary_line(report_dict: dict) -> str:
    totals = report_dict["totals"]
    return (
        f"strategy {report_dict['strategy']} on {report_dict['profile']}: "
        f"wall {totals['wall_s'] * 1e3:.4f} ms | "
        f"kernel {totals['kernel_s'] * 1e3:.4f} | "
        f"transfer {totals['transfer_s'] * 1e3:.4f} | "
        f"migration {totals['migration_s'] * 1e3:.4f} | "
        f"other {totals['other_s'] * 1e3:.4f} | "
        f"bytes {totals['bytes_moved']} | "
        f"offloaded {totals['calls_offloaded']} host {totals['calls_host']}"
    )


def cmd_replay(ns: argparse.Namespace) -> int:
    trace = load_trace(ns.trace)
    profile = resolve_profile(ns.profile)
    cfg = _config_for(ns, trace)
    report = replay(trace, ns.strategy, profile, cfg)
    payload = report.to_dict()
    print(_summary_line(payload))
    if ns.out:
        _write_json(ns.out, payload)
    if ns.figures:
        from . import figures

        for path in figures.render_replay_outputs(report, ns.figures):
            print(f"wrote {path}")
    return EXIT_OK


def _format_compare_table(rows: List[dict]) -> str:
    header = (
        f"{'strategy':>8}  {'wall_s':>12}  {'compute+data_s':>14}  "
        f"{'bytes_moved':>15}  {'speedup':>7}"
    )
    lines = [header]
    for row in rows:
        lines.append(
            f"{row['strategy']:>8}  {row['wall_s']:>12.6g}  "
            f"{row['compute_plus_data_s']:>14.6g}  "
            f"{row['bytes_moved']:>15d}  {row['speedup_vs_first']:>7.2f}"
        )
    return "\n".join(lines)


def cmd_compare(ns: argparse.Namespace) -> int:
    trace = load_trace(ns.trace)
    profile = resolve_profile(ns.profile)
    cfg = _config_for(ns, trace)
    comparison = compare(trace, ns.strategies, profile, cfg)
    payload = comparison.to_dict()
    print(_format_compare_table(payload["rows"]))
    if ns.out:
        _write_json(ns.out, payload)
    if ns.figures:
        from . import figures

        for path in figures.render_compare_outputs(comparison, ns.figures):
            print(f"wrote {path}")
    return EXIT_OK


def cmd_gen(ns: argparse.Namespace) -> int:
    spec = SynthSpec(
        n_matrices=ns.matrices,
        reuse_factor=ns.reuse,
        dims=ns.dims,
        elem_size=ns.elem,
        seed=ns.seed,
        page_size=ns.page_size,
    )
    trace = gen_synthetic(spec)
    dump_trace(trace, ns.out)
    print(f"wrote {len(trace)} calls to {ns.out}")
    return EXIT_OK


def cmd_calibrate(ns: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(ns.measurements).read_text())
    except OSError as exc:
        print(f"error: cannot read measurements: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except json.JSONDecodeError as exc:
        print(f"error: measurements file is not valid JSON: {exc}", file=sys.stderr)
        return EXIT_ERROR
    if not isinstance(doc, dict):
        print("error: measurements file must hold a JSON object", file=sys.stderr)
        return EXIT_ERROR
    base = resolve_profile(ns.base) if ns.base else None
    profile = fit_profile(doc, base)
    text = json.dumps(profile.to_dict(), indent=2)
    if ns.out:
        Path(ns.out).write_text(text + "\n")
        print(f"wrote profile {profile.name!r} to {ns.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_inspect(ns: argparse.Namespace) -> int:
    if ns.stats:
        try:
            stats = json.loads(Path(ns.stats).read_text())
        except OSError as exc:
            print(f"error: cannot read stats: {exc}", file=sys.stderr)
            return EXIT_ERROR
        except json.JSONDecodeError as exc:
            print(f"error: stats file is not valid JSON: {exc}", file=sys.stderr)
            return EXIT_ERROR
        print(json.dumps(stats, indent=2))
        return EXIT_OK

    trace = load_trace(ns.trace)
    cfg = parse_config(os.environ)
    if ns.threshold is not None:
        cfg = cfg.with_threshold(ns.threshold)
    per_routine: dict = {}
    would_offload = 0
    copy_bytes = 0
    dims_min = [None, None, None]
    dims_max = [None, None, None]
    for call in trace.calls:
        per_routine[call.routine] = per_routine.get(call.routine, 0) + 1
        if decide(call.routine, call.m, call.n, call.k, cfg).verdict.value == "Offload":
            would_offload += 1
        copy_bytes += strategy1_bytes(call)
        for axis, value in enumerate((call.m, call.n, call.k)):
            if dims_min[axis] is None or value < dims_min[axis]:
                dims_min[axis] = value
            if dims_max[axis] is None or value > dims_max[axis]:
                dims_max[axis] = value
    print(f"trace: {ns.trace}")
    print(
        f"header: version={trace.header.trace_version} "
        f"page_size={trace.header.page_size} source={trace.header.source} "
        f"machine={trace.header.machine}"
    )
    print(f"calls: {len(trace)}")
    for routine in sorted(per_routine):
        print(f"  {routine}: {per_routine[routine]}")
    if trace.calls:
        print(f"dims m/n/k min: {dims_min[0]},{dims_min[1]},{dims_min[2]}")
        print(f"dims m/n/k max: {dims_max[0]},{dims_max[1]},{dims_max[2]}")
    print(f"copy-per-call bytes: {copy_bytes}")
    print(f"would offload at threshold {cfg.threshold:g}: {would_offload}")
    return EXIT_OK


def cmd_run(ns: argparse.Namespace) -> int:
    from . import shim

    if ns.trace is not None:
        os.environ[ENV_TRACE] = ns.trace
    if ns.stats is not None:
        os.environ[shim.ENV_STATS] = ns.stats
    if ns.strategy is not None:
        os.environ[ENV_STRATEGY] = ns.strategy.code
    if ns.threshold is not None:
        os.environ[ENV_THRESHOLD] = repr(ns.threshold)
    if ns.debug is not None:
        os.environ[ENV_DEBUG] = str(ns.debug)
    args = list(ns.args)
    if args and args[0] == "--":
        args = args[1:]
    try:
        return shim.run_script(ns.script, args)
    except FileNotFoundError:
        print(f"error: script not found: {ns.script}", file=sys.stderr)
        return EXIT_ERROR
    except shim.ShimInitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage error or --help
        return exc.code if isinstance(exc.code, int) else EXIT_ERROR
    try:
        return ns.func(ns)
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        return EXIT_UNDERDETERMINED
    except ProfileError as exc:
        print(f"profile error: {exc}", file=sys.stderr)
        return EXIT_PROFILE
    except (ConfigParseError, SynthSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
