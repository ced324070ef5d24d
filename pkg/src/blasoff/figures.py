"""Rendered report outputs: per-call CSV tables and matplotlib figures.

The JSON report stays the canonical machine hand-off; on request the CLI
writes these human-facing renderings next to it.  Figures use the Agg
backend so output is deterministic and headless-safe.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Union

from .replay import Comparison, ReplayReport

_COMPONENTS = ("transfer_s", "kernel_s", "migration_s", "other_s")
_COMPONENT_LABELS = ("transfer", "kernel", "migration", "other")
_MAX_PER_CALL_BARS = 200


def _plt():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def write_replay_csv(report: ReplayReport, path: Union[str, Path]) -> None:
    """Per-call breakdown as a delimited table."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "seq",
                "routine",
                "verdict",
                "reason",
                "executed_on",
                "transfer_s",
                "kernel_s",
                "migration_s",
                "other_s",
                "total_s",
                "bytes_moved",
            ]
        )
        for entry in report.per_call:
            record = entry.to_record()
            writer.writerow(
                [
                    record["seq"],
                    record["routine"],
                    record["verdict"],
                    record["reason"],
                    record["executed_on"],
                    repr(record["transfer_s"]),
                    repr(record["kernel_s"]),
                    repr(record["migration_s"]),
                    repr(record["other_s"]),
                    repr(record["total_s"]),
                    record["bytes_moved"],
                ]
            )


def write_compare_csv(comparison: Comparison, path: Union[str, Path]) -> None:
    """Strategy comparison as a delimited table."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["strategy", "wall_s", "compute_plus_data_s", "bytes_moved", "speedup_vs_first"]
        )
        for row in comparison.rows:
            writer.writerow(
                [
                    row.strategy.code,
                    repr(row.wall_s),
                    repr(row.compute_plus_data_s),
                    row.bytes_moved,
                    repr(row.speedup_vs_first),
                ]
            )


def render_replay_figures(report: ReplayReport, out_dir: Union[str, Path]) -> List[Path]:
    """Write the replay figures; returns the paths created."""
    plt = _plt()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    # time components of the whole replay
    totals = report.totals
    values_ms = [
        totals.transfer_s * 1e3,
        totals.kernel_s * 1e3,
        totals.migration_s * 1e3,
        totals.other_s * 1e3,
    ]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    ax.bar(_COMPONENT_LABELS, values_ms, color="#4878cf")
    ax.set_ylabel("time (ms)")
    ax.set_title(
        f"strategy {report.strategy.code} on {report.profile_name}: "
        f"wall {totals.wall_s * 1e3:.3f} ms"
    )
    fig.tight_layout()
    path = out / "replay_components.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    # per-call view: stacked bars when readable, cumulative curve otherwise
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=120)
    if len(report.per_call) <= _MAX_PER_CALL_BARS:
        seqs = [entry.seq for entry in report.per_call]
        bottom = [0.0] * len(report.per_call)
        colors = ("#cf4878", "#4878cf", "#48cf78", "#aaaaaa")
        for component, label, color in zip(_COMPONENTS, _COMPONENT_LABELS, colors):
            values = [
                getattr(entry.breakdown, component) * 1e3 for entry in report.per_call
            ]
            ax.bar(seqs, values, bottom=bottom, label=label, color=color, width=0.9)
            bottom = [b + v for b, v in zip(bottom, values)]
        ax.set_xlabel("call seq")
        ax.legend(fontsize=8)
    else:
        running = 0.0
        cumulative = []
        for entry in report.per_call:
            running += entry.breakdown.total()
            cumulative.append(running * 1e3)
        ax.plot([entry.seq for entry in report.per_call], cumulative, color="#4878cf")
        ax.set_xlabel("call seq")
        ax.set_ylabel("cumulative time (ms)")
    ax.set_ylabel(ax.get_ylabel() or "time (ms)")
    ax.set_title(f"per-call cost, strategy {report.strategy.code}")
    fig.tight_layout()
    path = out / "replay_per_call.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written


def render_compare_figures(comparison: Comparison, out_dir: Union[str, Path]) -> List[Path]:
    """Write the strategy-comparison figures; returns the paths created."""
    plt = _plt()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    labels = [row.strategy.code for row in comparison.rows]

    fig, ax = plt.subplots(figsize=(5.6, 3.4), dpi=120)
    positions = range(len(labels))
    walls = [row.wall_s * 1e3 for row in comparison.rows]
    cpd = [row.compute_plus_data_s * 1e3 for row in comparison.rows]
    width = 0.38
    ax.bar([p - width / 2 for p in positions], walls, width=width, label="wall", color="#4878cf")
    ax.bar(
        [p + width / 2 for p in positions],
        cpd,
        width=width,
        label="compute+data",
        color="#cf4878",
    )
    ax.set_xticks(list(positions))
    ax.set_xticklabels([f"strategy {label}" for label in labels])
    ax.set_ylabel("time (ms)")
    ax.legend(fontsize=8)
    ax.set_title("strategy comparison")
    fig.tight_layout()
    path = out / "compare_times.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(5.6, 3.4), dpi=120)
    bytes_moved = [max(row.bytes_moved, 1) for row in comparison.rows]
    ax.bar([f"strategy {label}" for label in labels], bytes_moved, color="#48cf78")
    ax.set_yscale("log")
    ax.set_ylabel("bytes moved (log)")
    ax.set_title("data movement by strategy")
    fig.tight_layout()
    path = out / "compare_bytes.png"
    fig.savefig(path)
    plt.close(fig)
    written.append(path)
    return written


def render_replay_outputs(report: ReplayReport, out_dir: Union[str, Path]) -> List[Path]:
    """CSV table plus figures for one replay report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "replay_per_call.csv"
    write_replay_csv(report, csv_path)
    return [csv_path, *render_replay_figures(report, out)]


def render_compare_outputs(comparison: Comparison, out_dir: Union[str, Path]) -> List[Path]:
    """CSV table plus figures for a strategy comparison."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "compare_table.csv"
    write_compare_csv(comparison, csv_path)
    return [csv_path, *render_compare_figures(comparison, out)]
