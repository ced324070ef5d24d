"""Trace-driven simulation: replay call streams through the cost model.

replay() walks a trace in order, applies the offload rule to each call,
prices it under one data-management strategy, and aggregates totals plus
registry reuse statistics.  compare() does that once per strategy with a
fresh registry each time.  gen_synthetic() fabricates traces whose
operand sets repeat a configurable number of times, for studying how
migration cost amortizes over reuse.  All three are deterministic:
identical inputs give byte-identical serialized reports.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from .costmodel import CostBreakdown, HardwareProfile, cost
from .model import Decision, GemmCall, MatrixOperand, Strategy
from .policy import DEFAULT_PAGE_SIZE, OffloadConfig, should_offload
from .residency import ResidencyRegistry, ReuseStats
from .traceio import Trace, TraceHeader

REPORT_SCHEMA_VERSION = 1

# Synthetic base addresses stay inside a 47-bit canonical user space.
ADDRESS_SPACE_BUDGET = 1 << 47
_SYNTH_BASE = 1 << 32


class SynthSpecError(ValueError):
    """The synthetic-trace spec cannot be realized."""


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic trace.

    ``n_matrices`` operand sets are laid out page-aligned and disjoint;
    each appears ``reuse_factor`` times, so reuse statistics are exact by
    construction.  ``elem_size`` selects the routine (4 -> sgemm,
    8 -> dgemm, 16 -> zgemm).
    """

    n_matrices: int
    reuse_factor: int
    dims: Tuple[int, int, int]
    elem_size: int = 8
    seed: int = 0
    page_size: int = DEFAULT_PAGE_SIZE

    def __post_init__(self) -> None:
        if self.n_matrices < 1:
            raise SynthSpecError("n_matrices must be >= 1")
        if self.reuse_factor < 1:
            raise SynthSpecError("reuse_factor must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise SynthSpecError("dims must be three positive integers")
        if self.elem_size not in _SYNTH_ROUTINES:
            raise SynthSpecError(
                f"elem_size must be one of {sorted(_SYNTH_ROUTINES)}"
            )
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise SynthSpecError("page_size must be a positive power of two")


_SYNTH_ROUTINES = {4: "sgemm", 8: "dgemm", 16: "zgemm"}


def gen_synthetic(spec: SynthSpec) -> Trace:
    """Build a deterministic trace from a SynthSpec.

    Calls use trans 'T','N' with tight leading dims.  Matrix sets are
    separated by small random page gaps (seeded) so address reuse across
    sets never occurs; call order within each reuse round is a seeded
    shuffle when more than one set exists.
    """
    rng = random.Random(spec.seed)
    m, n, k = spec.dims
    routine = _SYNTH_ROUTINES[spec.elem_size]
    page = spec.page_size

    def paged(nbytes: int) -> int:
        return -(-nbytes // page) * page

    cursor = _SYNTH_BASE
    operand_sets: List[Dict[str, MatrixOperand]] = []
    for _ in range(spec.n_matrices):
        ops: Dict[str, MatrixOperand] = {}
        # storage shapes for 'T','N': A is k x m, B is k x n, C is m x n
        for role, (rows, cols) in (("A", (k, m)), ("B", (k, n)), ("C", (m, n))):
            ops[role] = MatrixOperand(
                cursor, rows, cols, rows, spec.elem_size, role
            )
            cursor += paged(rows * cols * spec.elem_size)
            cursor += rng.randint(1, 8) * page
        operand_sets.append(ops)
    if cursor > ADDRESS_SPACE_BUDGET:
        raise SynthSpecError(
            f"operand layout needs {cursor} bytes of address space, "
            f"budget is {ADDRESS_SPACE_BUDGET}"
        )

    calls: List[GemmCall] = []
    seq = 0
    order = list(range(spec.n_matrices))
    for _ in range(spec.reuse_factor):
        if spec.n_matrices > 1:
            rng.shuffle(order)
        for idx in order:
            ops = operand_sets[idx]
            seq += 1
            calls.append(
                GemmCall(
                    seq=seq,
                    routine=routine,
                    trans_a="T",
                    trans_b="N",
                    m=m,
                    n=n,
                    k=k,
                    a=ops["A"],
                    b=ops["B"],
                    c=ops["C"],
                    thread_id=0,
                )
            )
    header = TraceHeader(page_size=page, source="synthetic", machine="synthetic")
    return Trace(header=header, calls=tuple(calls))


@dataclass(frozen=True)
class PerCallResult:
    seq: int
    routine: str
    decision: Decision
    breakdown: CostBreakdown

    def to_record(self) -> Dict[str, object]:
        return {
            "seq": self.seq,
            "routine": self.routine,
            "verdict": self.decision.verdict.value,
            "reason": self.decision.reason.value,
            "executed_on": self.breakdown.executed_on.value,
            "transfer_s": self.breakdown.transfer_s,
            "kernel_s": self.breakdown.kernel_s,
            "migration_s": self.breakdown.migration_s,
            "other_s": self.breakdown.other_s,
            "total_s": self.breakdown.total(),
            "bytes_moved": self.breakdown.bytes_moved,
        }


@dataclass(frozen=True)
class ReplayTotals:
    wall_s: float = 0.0
    kernel_s: float = 0.0
    transfer_s: float = 0.0
    migration_s: float = 0.0
    other_s: float = 0.0
    bytes_moved: int = 0
    calls_offloaded: int = 0
    calls_host: int = 0

    def to_record(self) -> Dict[str, object]:
        return {
            "wall_s": self.wall_s,
            "kernel_s": self.kernel_s,
            "transfer_s": self.transfer_s,
            "migration_s": self.migration_s,
            "other_s": self.other_s,
            "bytes_moved": self.bytes_moved,
            "calls_offloaded": self.calls_offloaded,
            "calls_host": self.calls_host,
        }


@dataclass(frozen=True)
class ReplayReport:
    """Everything one replay produced, serializable with stable key order."""

    strategy: Strategy
    profile_name: str
    totals: ReplayTotals
    reuse: ReuseStats
    per_call: Tuple[PerCallResult, ...] = ()

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "strategy": self.strategy.code,
            "profile": self.profile_name,
            "totals": self.totals.to_record(),
            "reuse": {
                "migrated_bytes": self.reuse.migrated_bytes,
                "mean_touches_per_page": self.reuse.mean_touches_per_page,
                "max_touches": self.reuse.max_touches,
            },
            "per_call": [entry.to_record() for entry in self.per_call],
        }


def replay(
    trace: Trace,
    strat: Strategy,
    profile: HardwareProfile,
    cfg: OffloadConfig,
) -> ReplayReport:
    """Replay every call of the trace under one strategy.

    A fresh registry is used per replay; its page size comes from the
    config, not the trace header, so the same trace can be re-priced
    under different page granularities.
    """
    registry = ResidencyRegistry(
        page_size=cfg.page_size, capacity_bytes=cfg.device_capacity
    )
    per_call: List[PerCallResult] = []
    wall = kernel = transfer = migration = other = 0.0
    bytes_moved = 0
    offloaded = host = 0
    for call in trace.calls:
        decision = should_offload(call, cfg)
        breakdown = cost(call, strat, profile, registry, decision)
        per_call.append(PerCallResult(call.seq, call.routine, decision, breakdown))
        wall += breakdown.total()
        kernel += breakdown.kernel_s
        transfer += breakdown.transfer_s
        migration += breakdown.migration_s
        other += breakdown.other_s
        bytes_moved += breakdown.bytes_moved
        if decision.verdict.value == "Offload":
            offloaded += 1
        else:
            host += 1
    totals = ReplayTotals(
        wall_s=wall,
        kernel_s=kernel,
        transfer_s=transfer,
        migration_s=migration,
        other_s=other,
        bytes_moved=bytes_moved,
        calls_offloaded=offloaded,
        calls_host=host,
    )
    return ReplayReport(
        strategy=strat,
        profile_name=profile.name,
        totals=totals,
        reuse=registry.reuse_stats(),
        per_call=tuple(per_call),
    )


@dataclass(frozen=True)
class CompareRow:
    strategy: Strategy
    wall_s: float
    compute_plus_data_s: float
    bytes_moved: int
    speedup_vs_first: float

    def to_record(self) -> Dict[str, object]:
        return {
            "strategy": self.strategy.code,
            "wall_s": self.wall_s,
            "compute_plus_data_s": self.compute_plus_data_s,
            "bytes_moved": self.bytes_moved,
            "speedup_vs_first": self.speedup_vs_first,
        }


@dataclass(frozen=True)
class Comparison:
    rows: Tuple[CompareRow, ...]
    reports: Tuple[ReplayReport, ...]

    def to_dict(self) -> Dict[str, object]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "profile": self.reports[0].profile_name if self.reports else "",
            "rows": [row.to_record() for row in self.rows],
            "reports": [report.to_dict() for report in self.reports],
        }


def compare(
    trace: Trace,
    strategies: Sequence[Strategy],
    profile: HardwareProfile,
    cfg: OffloadConfig,
) -> Comparison:
    """Replay the trace once per strategy and tabulate the outcomes.

    ``compute_plus_data_s`` sums kernel, transfer and migration time;
    speedups are wall-time ratios versus the first strategy listed.
    """
    if not strategies:
        raise ValueError("compare needs at least one strategy")
    reports = tuple(replay(trace, strat, profile, cfg) for strat in strategies)
    first_wall = reports[0].totals.wall_s
    rows = tuple(
        CompareRow(
            strategy=report.strategy,
            wall_s=report.totals.wall_s,
            compute_plus_data_s=(
                report.totals.kernel_s
                + report.totals.transfer_s
                + report.totals.migration_s
            ),
            bytes_moved=report.totals.bytes_moved,
            speedup_vs_first=(
                first_wall / report.totals.wall_s if report.totals.wall_s else 1.0
            ),
        )
        for report in reports
    )
    return Comparison(rows=rows, reports=reports)
