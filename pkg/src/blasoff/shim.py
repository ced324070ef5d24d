"""In-process interposition of the Python-level BLAS gemm entry points.

The platform loader for a Python process is the import system, so the
preload trick here is attribute rebinding: install() captures the gemm
functions currently exported by ``scipy.linalg.blas`` (and its f2py
backing module) and rebinds those names to trampoline wrappers with the
same call signature.  Code that fetches the routines afterwards — via
``get_blas_funcs``, attribute access, or a later ``from ... import`` —
gets the wrappers; the ``run`` launcher in the CLI installs the shim
before the target script executes a single line, which is the preload
moment for this platform.

Each intercepted call is parsed into operand geometry, run through the
offload rule, optionally recorded to the JSON Lines trace, counted in
InterceptStats, and executed.  Execution always forwards to the captured
original (HostPassthrough backend) unless an accelerated backend is
supplied, so results are bit-identical with and without the shim.

Everything is configured through SCILIB_* environment variables (see the
policy module) plus SCILIB_STATS for the exit report path.
"""

from __future__ import annotations

import atexit
import json
import os
import runpy
import sys
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

from .model import Decision, GemmCall, MatrixOperand, StrategyKind, Verdict, storage_dims
from .policy import OffloadConfig, decide, parse_config
from .residency import ResidencyRegistry
from .traceio import TraceHeader, TraceWriter

INTERCEPTED_ROUTINES = ("sgemm", "dgemm", "cgemm", "zgemm")

ENV_STATS = "SCILIB_STATS"

# modules whose gemm attributes get rebound; the second is the f2py
# module the first re-exports, which get_blas_funcs resolves against
_PATCH_MODULE_NAMES = ("scipy.linalg.blas", "scipy.linalg._fblas")

_ROUTINE_ELEM = {"sgemm": 4, "dgemm": 8, "cgemm": 8, "zgemm": 16}
_TRANS_FLAGS = {0: "N", 1: "T", 2: "C"}


class ShimInitError(RuntimeError):
    """The shim could not bind to the underlying BLAS entry points."""


class BackendUnavailable(RuntimeError):
    """The selected backend cannot execute this call."""


class Backend:
    """Execution backend: one method per routine, BLAS-shaped signature."""

    tag = "Accelerated"

    def sgemm(self, *args: Any, **kwargs: Any) -> Any:
        raise BackendUnavailable("sgemm not implemented by this backend")

    def dgemm(self, *args: Any, **kwargs: Any) -> Any:
        raise BackendUnavailable("dgemm not implemented by this backend")

    def cgemm(self, *args: Any, **kwargs: Any) -> Any:
        raise BackendUnavailable("cgemm not implemented by this backend")

    def zgemm(self, *args: Any, **kwargs: Any) -> Any:
        raise BackendUnavailable("zgemm not implemented by this backend")


class HostPassthrough(Backend):
    """Forwards every routine to the captured original entry point.

    Must be — and is — bit-identical to calling the original directly:
    arguments and return value pass through untouched.
    """

    tag = "HostPassthrough"

    def __init__(self, forwards: Dict[str, Callable[..., Any]]) -> None:
        self._forwards = dict(forwards)

    def _forward(self, routine: str, args: Tuple[Any, ...], kwargs: Dict[str, Any]) -> Any:
        return self._forwards[routine](*args, **kwargs)

    def sgemm(self, *args: Any, **kwargs: Any) -> Any:
        return self._forward("sgemm", args, kwargs)

    def dgemm(self, *args: Any, **kwargs: Any) -> Any:
        return self._forward("dgemm", args, kwargs)

    def cgemm(self, *args: Any, **kwargs: Any) -> Any:
        return self._forward("cgemm", args, kwargs)

    def zgemm(self, *args: Any, **kwargs: Any) -> Any:
        return self._forward("zgemm", args, kwargs)


class AcceleratedStub(Backend):
    """Placeholder for a GPU-enabled BLAS; every call reports unavailable."""

    tag = "Accelerated"


@dataclass
class InterceptStats:
    """Counters kept by the shim; calls_seen = offloaded + host per routine."""

    calls_seen: Dict[str, int] = field(default_factory=dict)
    calls_offloaded: Dict[str, int] = field(default_factory=dict)
    calls_host: Dict[str, int] = field(default_factory=dict)
    forwarded_unparsed: int = 0
    backend_fallbacks: int = 0

    def count(self, routine: str, verdict: Verdict) -> None:
        self.calls_seen[routine] = self.calls_seen.get(routine, 0) + 1
        bucket = (
            self.calls_offloaded if verdict is Verdict.OFFLOAD else self.calls_host
        )
        bucket[routine] = bucket.get(routine, 0) + 1

    @property
    def total_seen(self) -> int:
        return sum(self.calls_seen.values())

    @property
    def total_offloaded(self) -> int:
        return sum(self.calls_offloaded.values())

    @property
    def total_host(self) -> int:
        return sum(self.calls_host.values())

    def snapshot(
        self,
        registry: Optional[ResidencyRegistry] = None,
        bytes_traced: int = 0,
        config: Optional[OffloadConfig] = None,
    ) -> Dict[str, object]:
        """Serializable view of the counters plus registry reuse stats."""
        payload: Dict[str, object] = {
            "calls_seen": dict(sorted(self.calls_seen.items())),
            "calls_offloaded": dict(sorted(self.calls_offloaded.items())),
            "calls_host": dict(sorted(self.calls_host.items())),
            "totals": {
                "seen": self.total_seen,
                "offloaded": self.total_offloaded,
                "host": self.total_host,
            },
            "forwarded_unparsed": self.forwarded_unparsed,
            "backend_fallbacks": self.backend_fallbacks,
            "bytes_traced": bytes_traced,
        }
        if config is not None:
            payload["config"] = {
                "strategy": config.strategy.code,
                "threshold": config.threshold,
            }
        if registry is not None:
            reuse = registry.reuse_stats()
            payload["reuse"] = {
                "migrated_bytes": reuse.migrated_bytes,
                "mean_touches_per_page": reuse.mean_touches_per_page,
                "max_touches": reuse.max_touches,
            }
            payload["resident_bytes"] = registry.resident_bytes
        return payload


@dataclass
class _ShimState:
    config: OffloadConfig
    backend: Backend
    registry: ResidencyRegistry
    stats: InterceptStats
    originals: Dict[str, Callable[..., Any]]
    stats_path: Optional[str]
    writer: Optional[TraceWriter] = None
    lock: threading.Lock = field(default_factory=threading.Lock)
    tls: threading.local = field(default_factory=threading.local)
    seq: int = 0
    active: bool = True
    finalized: bool = False


_state: Optional[_ShimState] = None
_resolved: Dict[str, Callable[..., Any]] = {}


def _log(level: int, message: str) -> None:
    state = _state
    if state is not None and state.config.debug_level >= level:
        sys.stderr.write(f"[blasoff] {message}\n")


def _blas_modules() -> Tuple[Any, ...]:
    import importlib

    modules = []
    for name in _PATCH_MODULE_NAMES:
        try:
            modules.append(importlib.import_module(name))
        except ImportError as exc:
            raise ShimInitError(
                f"BLAS provider module {name!r} not importable: {exc}"
            ) from None
    return tuple(modules)


def resolve_next(symbol: str) -> Callable[..., Any]:
    """Return the definition a call would reach without this shim.

    Accepts native-style trailing-underscore spellings ("dgemm_") as well
    as the plain Python names.  The first resolution is cached; repeated
    calls return the identical object.  An unknown symbol is a fatal
    initialization error naming it.
    """
    name = symbol.rstrip("_") if symbol.endswith("_") else symbol
    cached = _resolved.get(name)
    if cached is not None:
        return cached
    primary = _blas_modules()[0]
    fn = getattr(primary, name, None)
    if fn is not None and getattr(fn, "_blasoff_wrapper", False):
        fn = fn._blasoff_forward
    if fn is None or not callable(fn):
        raise ShimInitError(
            f"BLAS symbol {symbol!r} not found in {_PATCH_MODULE_NAMES[0]}"
        )
    _resolved[name] = fn
    return fn


def _array_view(obj: Any) -> Any:
    import numpy as np

    return obj if isinstance(obj, np.ndarray) else np.asarray(obj)


def _pick_arg(
    args: Tuple[Any, ...], kwargs: Dict[str, Any], name: str, index: int, default: Any = None
) -> Any:
    if name in kwargs:
        return kwargs[name]
    if len(args) > index:
        return args[index]
    return default


def _operand_from_array(arr: Any, role: str, rows: int, cols: int, elem: int) -> MatrixOperand:
    address = int(arr.__array_interface__["data"][0])
    itemsize = arr.itemsize
    ld = rows
    if (
        arr.ndim == 2
        and arr.strides[0] == itemsize
        and arr.strides[1] >= rows * itemsize
        and arr.strides[1] % itemsize == 0
    ):
        # column-major layout, possibly with padded columns
        ld = arr.strides[1] // itemsize
    return MatrixOperand(address, rows, cols, ld, elem, role)


@dataclass(frozen=True)
class _ParsedGemm:
    trans_a: str
    trans_b: str
    m: int
    n: int
    k: int
    a: MatrixOperand
    b: MatrixOperand
    c: Optional[MatrixOperand]


def _parse_gemm_args(
    routine: str, args: Tuple[Any, ...], kwargs: Dict[str, Any]
) -> Optional[_ParsedGemm]:
    """Extract call geometry from a (alpha, a, b, beta, c, ...) argument list.

    Returns None when the arguments do not describe a call this model can
    represent (wrong ranks, zero dims, mismatched inner dimension);
    such calls are forwarded without being traced.
    """
    a_obj = _pick_arg(args, kwargs, "a", 1)
    b_obj = _pick_arg(args, kwargs, "b", 2)
    if a_obj is None or b_obj is None:
        return None
    c_obj = _pick_arg(args, kwargs, "c", 4)
    ta_flag = _pick_arg(args, kwargs, "trans_a", 5, 0)
    tb_flag = _pick_arg(args, kwargs, "trans_b", 6, 0)
    try:
        trans_a = _TRANS_FLAGS[int(ta_flag)]
        trans_b = _TRANS_FLAGS[int(tb_flag)]
    except (KeyError, TypeError, ValueError):
        return None
    try:
        a_arr = _array_view(a_obj)
        b_arr = _array_view(b_obj)
    except Exception:
        return None
    if a_arr.ndim != 2 or b_arr.ndim != 2:
        return None
    if trans_a == "N":
        m, k = a_arr.shape
    else:
        k, m = a_arr.shape
    if trans_b == "N":
        kb, n = b_arr.shape
    else:
        n, kb = b_arr.shape
    if kb != k or min(m, n, k) < 1:
        return None
    elem = _ROUTINE_ELEM[routine]
    a_rows, a_cols = storage_dims(trans_a, (m, k))
    b_rows, b_cols = storage_dims(trans_b, (k, n))
    try:
        a_op = _operand_from_array(a_arr, "A", a_rows, a_cols, elem)
        b_op = _operand_from_array(b_arr, "B", b_rows, b_cols, elem)
    except Exception:
        return None
    c_op = None
    if c_obj is not None:
        try:
            c_arr = _array_view(c_obj)
            if c_arr.ndim == 2 and c_arr.shape == (m, n):
                c_op = _operand_from_array(c_arr, "C", m, n, elem)
        except Exception:
            c_op = None
    return _ParsedGemm(trans_a, trans_b, m, n, k, a_op, b_op, c_op)


def _touch_for_migration(state: _ShimState, operand: MatrixOperand) -> None:
    action = state.registry.touch(operand)
    _log(3, f"touch {operand.role}: {action.outcome.value} new_pages={action.new_pages}")


def _record_call(
    state: _ShimState,
    routine: str,
    parsed: _ParsedGemm,
    c_op: MatrixOperand,
    decision: Decision,
    t0: int,
    t1: int,
) -> None:
    with state.lock:
        state.seq += 1
        call = GemmCall(
            seq=state.seq,
            routine=routine,
            trans_a=parsed.trans_a,
            trans_b=parsed.trans_b,
            m=parsed.m,
            n=parsed.n,
            k=parsed.k,
            a=parsed.a,
            b=parsed.b,
            c=c_op,
            thread_id=threading.get_ident(),
            t_enter_ns=t0,
            t_exit_ns=t1,
        )
        if state.config.trace_path is not None:
            if state.writer is None:
                state.writer = TraceWriter(
                    state.config.trace_path,
                    TraceHeader(
                        page_size=state.config.page_size,
                        source="recorded",
                        machine=os.uname().nodename if hasattr(os, "uname") else "unknown",
                    ),
                )
            state.writer.write_call(call)
        state.stats.count(routine, decision.verdict)


def _intercept(
    state: _ShimState,
    routine: str,
    forward: Callable[..., Any],
    args: Tuple[Any, ...],
    kwargs: Dict[str, Any],
) -> Any:
    parsed = None
    try:
        parsed = _parse_gemm_args(routine, args, kwargs)
    except Exception:
        parsed = None
    if parsed is None:
        with state.lock:
            state.stats.forwarded_unparsed += 1
        return forward(*args, **kwargs)

    decision = decide(routine, parsed.m, parsed.n, parsed.k, state.config)
    _log(
        2,
        f"{routine} m={parsed.m} n={parsed.n} k={parsed.k} "
        f"-> {decision.verdict.value} ({decision.reason.value})",
    )

    migrate = (
        decision.verdict is Verdict.OFFLOAD
        and state.config.strategy.kind is StrategyKind.FIRST_TOUCH_MIGRATE
    )
    if migrate:
        _touch_for_migration(state, parsed.a)
        _touch_for_migration(state, parsed.b)
        if parsed.c is not None:
            _touch_for_migration(state, parsed.c)

    t0 = time.monotonic_ns()
    if decision.verdict is Verdict.OFFLOAD:
        try:
            result = getattr(state.backend, routine)(*args, **kwargs)
        except BackendUnavailable as exc:
            with state.lock:
                state.stats.backend_fallbacks += 1
            _log(1, f"backend unavailable for {routine} ({exc}); host fallback")
            result = forward(*args, **kwargs)
    else:
        result = forward(*args, **kwargs)
    t1 = time.monotonic_ns()

    c_op = parsed.c
    if c_op is None:
        try:
            c_op = _operand_from_array(
                _array_view(result), "C", parsed.m, parsed.n, _ROUTINE_ELEM[routine]
            )
        except Exception:
            c_op = None
        if c_op is not None and migrate:
            # the output buffer was created inside the call; its first
            # device-side use is still this call
            _touch_for_migration(state, c_op)
    if c_op is None:
        with state.lock:
            state.stats.forwarded_unparsed += 1
        return result

    _record_call(state, routine, parsed, c_op, decision, t0, t1)
    return result


def _make_wrapper(routine: str, forward: Callable[..., Any]) -> Callable[..., Any]:
    def gemm_wrapper(*args: Any, **kwargs: Any) -> Any:
        state = _state
        if state is None or not state.active:
            return forward(*args, **kwargs)
        tls = state.tls
        if getattr(tls, "busy", False):
            # nested BLAS call made while intercepting: forward directly
            return forward(*args, **kwargs)
        tls.busy = True
        try:
            return _intercept(state, routine, forward, args, kwargs)
        finally:
            tls.busy = False

    gemm_wrapper.__name__ = routine
    gemm_wrapper.__qualname__ = routine
    gemm_wrapper.__doc__ = getattr(forward, "__doc__", None)
    gemm_wrapper._blasoff_wrapper = True  # type: ignore[attr-defined]
    gemm_wrapper._blasoff_forward = forward  # type: ignore[attr-defined]
    return gemm_wrapper


def install(
    config: Optional[OffloadConfig] = None,
    *,
    backend: Optional[Backend] = None,
    stats_path: Optional[str] = None,
) -> None:
    """Bind the trampolines; reads SCILIB_* configuration when not given.

    Idempotent: a second install while active is a no-op.  Raises
    ShimInitError when the BLAS provider or a gemm symbol is missing.
    """
    global _state
    if _state is not None and _state.active:
        return
    cfg = config if config is not None else parse_config(os.environ)
    modules = _blas_modules()
    originals = {routine: resolve_next(routine) for routine in INTERCEPTED_ROUTINES}
    state = _ShimState(
        config=cfg,
        backend=backend if backend is not None else HostPassthrough(originals),
        registry=ResidencyRegistry(
            page_size=cfg.page_size, capacity_bytes=cfg.device_capacity
        ),
        stats=InterceptStats(),
        originals=originals,
        stats_path=stats_path if stats_path is not None else os.environ.get(ENV_STATS) or None,
    )
    for routine, original in originals.items():
        wrapper = _make_wrapper(routine, original)
        for module in modules:
            if hasattr(module, routine):
                setattr(module, routine, wrapper)
    _state = state
    atexit.register(finalize)
    _log(1, f"installed: strategy={cfg.strategy.code} threshold={cfg.threshold}")


def finalize() -> None:
    """Flush the trace footer and emit the stats report; idempotent."""
    state = _state
    if state is None or state.finalized:
        return
    state.finalized = True
    bytes_traced = 0
    if state.writer is not None:
        state.writer.close()
        bytes_traced = state.writer.bytes_written
    payload = state.stats.snapshot(state.registry, bytes_traced, state.config)
    if state.stats_path:
        try:
            Path(state.stats_path).write_text(json.dumps(payload, indent=2) + "\n")
        except OSError as exc:
            sys.stderr.write(f"[blasoff] cannot write stats to {state.stats_path}: {exc}\n")
    if state.config.debug_level >= 1:
        totals = payload["totals"]
        sys.stderr.write(
            "[blasoff] calls seen={seen} offloaded={offloaded} host={host}\n".format(
                **totals  # type: ignore[arg-type]
            )
        )


# the documented exit hook, by its contract name
dump_stats_at_exit = finalize


def uninstall() -> None:
    """Restore the original entry points and finalize outputs."""
    global _state
    state = _state
    if state is None:
        return
    if state.active:
        modules = _blas_modules()
        for routine, original in state.originals.items():
            for module in modules:
                current = getattr(module, routine, None)
                if current is not None and getattr(current, "_blasoff_wrapper", False):
                    setattr(module, routine, original)
        state.active = False
    finalize()
    atexit.unregister(finalize)
    _resolved.clear()
    _state = None


def get_stats() -> Optional[InterceptStats]:
    """Counters of the active (or most recent, pre-uninstall) shim."""
    return _state.stats if _state is not None else None


def get_registry() -> Optional[ResidencyRegistry]:
    return _state.registry if _state is not None else None


class intercepted:
    """Context manager: install on entry, uninstall on exit.

    Yields the InterceptStats gathered while the context was active.
    """

    def __init__(
        self,
        config: Optional[OffloadConfig] = None,
        *,
        backend: Optional[Backend] = None,
        stats_path: Optional[str] = None,
    ) -> None:
        self._config = config
        self._backend = backend
        self._stats_path = stats_path
        self.stats: Optional[InterceptStats] = None

    def __enter__(self) -> InterceptStats:
        install(self._config, backend=self._backend, stats_path=self._stats_path)
        assert _state is not None
        self.stats = _state.stats
        return self.stats

    def __exit__(self, *exc_info: object) -> None:
        uninstall()


def run_script(script: str, argv: Sequence[str] = (), config: Optional[OffloadConfig] = None) -> int:
    """Run a Python script with the shim installed around it.

    The script executes unmodified as ``__main__`` with ``sys.argv`` set;
    its SystemExit code (if any) is returned after the shim finalizes.
    """
    if not Path(script).exists():
        raise FileNotFoundError(script)
    install(config)
    saved_argv = sys.argv
    sys.argv = [script, *argv]
    code = 0
    try:
        runpy.run_path(script, run_name="__main__")
    except SystemExit as exc:
        if isinstance(exc.code, int):
            code = exc.code
        elif exc.code is not None:
            sys.stderr.write(f"{exc.code}\n")
            code = 1
    finally:
        sys.argv = saved_argv
        uninstall()
    return code
