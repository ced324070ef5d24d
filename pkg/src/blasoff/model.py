"""Core value types for intercepted level-3 BLAS calls.

Everything here is an immutable value: operand geometry, a single gemm
invocation, the data-management strategy tags, and offload decisions.
Addresses are plain integers so a recorded call stream can be replayed on
any machine; only the live interposer ever binds them to real memory.
Column-major (Fortran) storage is assumed throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional, Tuple

VALID_ELEM_SIZES = (4, 8, 16)
VALID_TRANS = ("N", "T", "C")
OPERAND_ROLES = ("A", "B", "C")

# routine -> (flops per m*n*k, element size in bytes)
# Real gemm does one multiply-add per inner-product term (factor 2);
# complex gemm does four multiplies and four adds (factor 8).
_ROUTINES: Dict[str, Tuple[int, int]] = {
    "sgemm": (2, 4),
    "dgemm": (2, 8),
    "cgemm": (8, 8),
    "zgemm": (8, 16),
}


class UnknownRoutineError(KeyError):
    """Raised when a routine name has no registered flop formula."""


def register_routine(name: str, flop_factor: int, elem_size: int) -> None:
    """Register an additional level-3 routine (e.g. a batched variant)."""
    if flop_factor <= 0 or elem_size not in VALID_ELEM_SIZES:
        raise ValueError(f"bad routine registration for {name!r}")
    _ROUTINES[name] = (flop_factor, elem_size)


def known_routines() -> Tuple[str, ...]:
    return tuple(_ROUTINES)


def routine_elem_size(routine: str) -> int:
    """Element size in bytes for a registered routine name."""
    try:
        return _ROUTINES[routine][1]
    except KeyError:
        raise UnknownRoutineError(routine) from None


def routine_flop_factor(routine: str) -> int:
    """Flops per m*n*k for a registered routine name (2 real, 8 complex)."""
    try:
        return _ROUTINES[routine][0]
    except KeyError:
        raise UnknownRoutineError(routine) from None


@dataclass(frozen=True)
class MatrixOperand:
    """One matrix argument of a gemm call, as stored in memory.

    ``rows``/``cols`` describe the stored (pre-transpose) matrix;
    ``leading_dim`` is the column stride in elements, so the operand spans
    ``((cols - 1) * leading_dim + rows) * elem_size`` contiguous bytes
    starting at ``base_address``.
    """

    base_address: int
    rows: int
    cols: int
    leading_dim: int
    elem_size: int
    role: str

    def __post_init__(self) -> None:
        if self.base_address < 0:
            raise ValueError("base_address must be non-negative")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.leading_dim < self.rows:
            raise ValueError(
                f"leading_dim {self.leading_dim} < rows {self.rows}"
            )
        if self.elem_size not in VALID_ELEM_SIZES:
            raise ValueError(f"elem_size must be one of {VALID_ELEM_SIZES}")
        if self.role not in OPERAND_ROLES:
            raise ValueError(f"role must be one of {OPERAND_ROLES}")

    @property
    def region_bytes(self) -> int:
        """Contiguous extent of the operand in bytes (always positive)."""
        return ((self.cols - 1) * self.leading_dim + self.rows) * self.elem_size

    @property
    def end_address(self) -> int:
        """First byte past the operand's region."""
        return self.base_address + self.region_bytes


def storage_dims(trans: str, untransposed: Tuple[int, int]) -> Tuple[int, int]:
    """Stored (rows, cols) of an operand given its transpose flag.

    ``untransposed`` is the logical shape the operand contributes to the
    product; with a 'T' or 'C' flag the stored matrix is the flip of that.
    """
    if trans not in VALID_TRANS:
        raise ValueError(f"trans must be one of {VALID_TRANS}")
    r, c = untransposed
    return (r, c) if trans == "N" else (c, r)


@dataclass(frozen=True)
class GemmCall:
    """A single intercepted gemm invocation: C(m,n) += op(A) * op(B).

    Operand shapes are validated against the dimension triple and the
    transpose flags, so a constructed call is internally consistent.
    """

    seq: int
    routine: str
    trans_a: str
    trans_b: str
    m: int
    n: int
    k: int
    a: MatrixOperand
    b: MatrixOperand
    c: MatrixOperand
    thread_id: int = 0
    t_enter_ns: Optional[int] = None
    t_exit_ns: Optional[int] = None

    def __post_init__(self) -> None:
        if self.seq < 1:
            raise ValueError("seq must be >= 1")
        if min(self.m, self.n, self.k) < 1:
            raise ValueError("m, n, k must all be >= 1")
        for trans in (self.trans_a, self.trans_b):
            if trans not in VALID_TRANS:
                raise ValueError(f"trans flag must be one of {VALID_TRANS}")
        expected = {
            "A": storage_dims(self.trans_a, (self.m, self.k)),
            "B": storage_dims(self.trans_b, (self.k, self.n)),
            "C": (self.m, self.n),
        }
        for op in (self.a, self.b, self.c):
            want = expected.get(op.role)
            if op.role not in expected:
                raise ValueError(f"unexpected operand role {op.role!r}")
            if (op.rows, op.cols) != want:
                raise ValueError(
                    f"operand {op.role} stored as {op.rows}x{op.cols}, "
                    f"expected {want[0]}x{want[1]}"
                )
        roles = {self.a.role, self.b.role, self.c.role}
        if roles != set(OPERAND_ROLES):
            raise ValueError("call needs exactly one A, one B and one C operand")
        if self.t_enter_ns is not None and self.t_exit_ns is not None:
            if self.t_exit_ns < self.t_enter_ns:
                raise ValueError("t_exit_ns precedes t_enter_ns")

    @property
    def operands(self) -> Tuple[MatrixOperand, MatrixOperand, MatrixOperand]:
        return (self.a, self.b, self.c)

    @property
    def duration_ns(self) -> Optional[int]:
        if self.t_enter_ns is None or self.t_exit_ns is None:
            return None
        return self.t_exit_ns - self.t_enter_ns


def flop_count(call: GemmCall) -> int:
    """Floating-point operations performed by the call.

    2*m*n*k for real routines, 8*m*n*k for complex ones.
    """
    try:
        factor = _ROUTINES[call.routine][0]
    except KeyError:
        raise UnknownRoutineError(call.routine) from None
    return factor * call.m * call.n * call.k


def make_call(
    seq: int,
    routine: str,
    trans_a: str,
    trans_b: str,
    m: int,
    n: int,
    k: int,
    *,
    addr_a: int = 0,
    addr_b: int = 0,
    addr_c: int = 0,
    lda: Optional[int] = None,
    ldb: Optional[int] = None,
    ldc: Optional[int] = None,
    thread_id: int = 0,
    t_enter_ns: Optional[int] = None,
    t_exit_ns: Optional[int] = None,
) -> GemmCall:
    """Build a call whose operands use tight leading dims unless overridden."""
    elem = routine_elem_size(routine)
    ar, ac = storage_dims(trans_a, (m, k))
    br, bc = storage_dims(trans_b, (k, n))
    return GemmCall(
        seq=seq,
        routine=routine,
        trans_a=trans_a,
        trans_b=trans_b,
        m=m,
        n=n,
        k=k,
        a=MatrixOperand(addr_a, ar, ac, lda or ar, elem, "A"),
        b=MatrixOperand(addr_b, br, bc, ldb or br, elem, "B"),
        c=MatrixOperand(addr_c, m, n, ldc or m, elem, "C"),
        thread_id=thread_id,
        t_enter_ns=t_enter_ns,
        t_exit_ns=t_exit_ns,
    )


class StrategyKind(Enum):
    COPY_PER_CALL = "copy_per_call"
    UNIFIED_ACCESS = "unified_access"
    FIRST_TOUCH_MIGRATE = "first_touch_migrate"


class Residence(Enum):
    """Where unified-access data lives while the device computes on it."""

    HOST_MEMORY = "host"
    DEVICE_MEMORY = "device"


@dataclass(frozen=True)
class Strategy:
    """Data-management strategy used when a call is offloaded.

    * copy-per-call: stage A and B to the device, copy C over and back.
    * unified-access: compute in place over the coherent link; the
      ``residence`` field says which side's memory holds the data.
    * first-touch-migrate: pages migrate to the device on first use and
      stay resident, so repeated calls pay no further movement.
    """

    kind: StrategyKind
    residence: Optional[Residence] = None

    def __post_init__(self) -> None:
        if self.kind is StrategyKind.UNIFIED_ACCESS:
            if self.residence is None:
                raise ValueError("unified access needs a residence")
        elif self.residence is not None:
            raise ValueError(f"{self.kind.value} does not take a residence")

    @property
    def code(self) -> str:
        """Short form used in configuration and reports: 1, 2H, 2D or 3."""
        if self.kind is StrategyKind.COPY_PER_CALL:
            return "1"
        if self.kind is StrategyKind.FIRST_TOUCH_MIGRATE:
            return "3"
        return "2H" if self.residence is Residence.HOST_MEMORY else "2D"

    @classmethod
    def from_code(cls, code: str) -> "Strategy":
        """Parse a strategy code; "2L" is accepted as an alias of "2H"."""
        normalized = code.strip().upper()
        table = {
            "1": COPY_PER_CALL,
            "2H": UNIFIED_HOST,
            "2L": UNIFIED_HOST,
            "2D": UNIFIED_DEVICE,
            "3": FIRST_TOUCH_MIGRATE,
        }
        try:
            return table[normalized]
        except KeyError:
            raise ValueError(
                f"unknown strategy code {code!r} (expected 1, 2H, 2D or 3)"
            ) from None

    def __str__(self) -> str:
        return self.code


COPY_PER_CALL = Strategy(StrategyKind.COPY_PER_CALL)
UNIFIED_HOST = Strategy(StrategyKind.UNIFIED_ACCESS, Residence.HOST_MEMORY)
UNIFIED_DEVICE = Strategy(StrategyKind.UNIFIED_ACCESS, Residence.DEVICE_MEMORY)
FIRST_TOUCH_MIGRATE = Strategy(StrategyKind.FIRST_TOUCH_MIGRATE)

ALL_STRATEGIES = (COPY_PER_CALL, UNIFIED_HOST, UNIFIED_DEVICE, FIRST_TOUCH_MIGRATE)


class Verdict(Enum):
    OFFLOAD = "Offload"
    HOST = "Host"


class Reason(Enum):
    BELOW_THRESHOLD = "BelowThreshold"
    ROUTINE_DISABLED = "RoutineDisabled"
    OFFLOADED = "Offloaded"
    CAPACITY_EXCEEDED = "CapacityExceeded"


_HOST_REASONS = frozenset(
    {Reason.BELOW_THRESHOLD, Reason.ROUTINE_DISABLED, Reason.CAPACITY_EXCEEDED}
)


@dataclass(frozen=True)
class Decision:
    """Outcome of the offload policy for one call, with its reason."""

    verdict: Verdict
    reason: Reason

    def __post_init__(self) -> None:
        offloaded = self.reason is Reason.OFFLOADED
        if (self.verdict is Verdict.OFFLOAD) != offloaded:
            raise ValueError(
                f"verdict {self.verdict.value} inconsistent with reason "
                f"{self.reason.value}"
            )

    @classmethod
    def offload(cls) -> "Decision":
        return cls(Verdict.OFFLOAD, Reason.OFFLOADED)

    @classmethod
    def host(cls, reason: Reason) -> "Decision":
        if reason not in _HOST_REASONS:
            raise ValueError(f"{reason.value} is not a host-side reason")
        return cls(Verdict.HOST, reason)
