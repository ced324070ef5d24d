"""blasoff: intercept level-3 BLAS calls, decide GPU offload, replay traces.

Two halves share one vocabulary of types:

* live interception (``blasoff.shim``) wraps the Python BLAS entry
  points, applies the size-threshold offload rule and a data-management
  strategy, and records JSON Lines call traces;
* analytic replay (``blasoff.replay`` / ``blasoff.costmodel``) re-prices
  a recorded or synthetic trace on a calibrated machine profile,
  reproducing per-call timing breakdowns without the hardware.
"""

from .costmodel import (
    CostBreakdown,
    HardwareProfile,
    Processor,
    builtin_profiles,
    cost,
    resolve_profile,
    strategy1_bytes,
)
from .model import (
    ALL_STRATEGIES,
    COPY_PER_CALL,
    Decision,
    FIRST_TOUCH_MIGRATE,
    GemmCall,
    MatrixOperand,
    Reason,
    Residence,
    Strategy,
    StrategyKind,
    UNIFIED_DEVICE,
    UNIFIED_HOST,
    UnknownRoutineError,
    Verdict,
    flop_count,
    make_call,
)
from .policy import (
    ConfigParseError,
    OffloadConfig,
    effective_size,
    parse_config,
    should_offload,
)
from .replay import (
    Comparison,
    ReplayReport,
    SynthSpec,
    SynthSpecError,
    compare,
    gen_synthetic,
    replay,
)
from .residency import (
    MigrationAction,
    MigrationOutcome,
    PageRange,
    ResidencyRegistry,
    ReuseStats,
    pages_for,
)
from .traceio import Trace, TraceFormatError, TraceHeader, dump_trace, load_trace

__version__ = "0.1.0"

__all__ = [
    "ALL_STRATEGIES",
    "COPY_PER_CALL",
    "Comparison",
    "ConfigParseError",
    "CostBreakdown",
    "Decision",
    "FIRST_TOUCH_MIGRATE",
    "GemmCall",
    "HardwareProfile",
    "MatrixOperand",
    "MigrationAction",
    "MigrationOutcome",
    "OffloadConfig",
    "PageRange",
    "Processor",
    "Reason",
    "ReplayReport",
    "Residence",
    "ResidencyRegistry",
    "ReuseStats",
    "Strategy",
    "StrategyKind",
    "SynthSpec",
    "SynthSpecError",
    "Trace",
    "TraceFormatError",
    "TraceHeader",
    "UNIFIED_DEVICE",
    "UNIFIED_HOST",
    "UnknownRoutineError",
    "Verdict",
    "builtin_profiles",
    "compare",
    "cost",
    "dump_trace",
    "effective_size",
    "flop_count",
    "gen_synthetic",
    "load_trace",
    "make_call",
    "pages_for",
    "parse_config",
    "replay",
    "resolve_profile",
    "should_offload",
    "strategy1_bytes",
    "__version__",
]
