"""JSON Lines trace format shared by the interposer and the replayer.

A trace file is one JSON object per line:

    {"trace_version":1,"page_size":4096,"source":"recorded","machine":"..."}
    {"seq":1,"tid":0,"routine":"dgemm","ta":"T","tb":"N","m":32,"n":2400,
     "k":93536,"lda":93536,"ldb":93536,"ldc":32,"a":"0x10000","b":"0x20000",
     "c":"0x30000","t0":123,"t1":456}
    {"calls":1}

The first line is the header, the last a footer whose call count detects
truncated files.  Addresses are hex strings; t0/t1 (monotonic ns) are
optional.  Leading dims describe the stored (pre-transpose) operands, so
a call line plus its routine's element size fully reconstructs operand
geometry.
"""

from __future__ import annotations

import io
import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, TextIO, Tuple, Union

from .model import (
    GemmCall,
    MatrixOperand,
    VALID_TRANS,
    routine_elem_size,
    storage_dims,
)
from .policy import DEFAULT_PAGE_SIZE

TRACE_VERSION = 1


class TraceFormatError(ValueError):
    """A trace file or line violates the format; carries the line number."""

    def __init__(self, message: str, line_no: Optional[int] = None) -> None:
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class TraceHeader:
    page_size: int = DEFAULT_PAGE_SIZE
    source: str = "recorded"
    machine: str = "unknown"
    trace_version: int = TRACE_VERSION

    def __post_init__(self) -> None:
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ValueError("page_size must be a positive power of two")
        if self.source not in ("recorded", "synthetic"):
            raise ValueError("source must be 'recorded' or 'synthetic'")

    def to_record(self) -> Dict[str, object]:
        return {
            "trace_version": self.trace_version,
            "page_size": self.page_size,
            "source": self.source,
            "machine": self.machine,
        }


@dataclass(frozen=True)
class Trace:
    header: TraceHeader
    calls: Tuple[GemmCall, ...] = ()

    def __post_init__(self) -> None:
        if not isinstance(self.calls, tuple):
            object.__setattr__(self, "calls", tuple(self.calls))
        prev = 0
        for call in self.calls:
            if call.seq <= prev:
                raise ValueError(
                    f"seq {call.seq} not strictly increasing after {prev}"
                )
            prev = call.seq

    def __len__(self) -> int:
        return len(self.calls)


def call_to_record(call: GemmCall) -> Dict[str, object]:
    """Serialize one call to its trace-line dict (stable key order)."""
    record: Dict[str, object] = {
        "seq": call.seq,
        "tid": call.thread_id,
        "routine": call.routine,
        "ta": call.trans_a,
        "tb": call.trans_b,
        "m": call.m,
        "n": call.n,
        "k": call.k,
        "lda": call.a.leading_dim,
        "ldb": call.b.leading_dim,
        "ldc": call.c.leading_dim,
        "a": hex(call.a.base_address),
        "b": hex(call.b.base_address),
        "c": hex(call.c.base_address),
    }
    if call.t_enter_ns is not None:
        record["t0"] = call.t_enter_ns
    if call.t_exit_ns is not None:
        record["t1"] = call.t_exit_ns
    return record


def _require(record: Dict[str, object], key: str, line_no: Optional[int]) -> object:
    try:
        return record[key]
    except KeyError:
        raise TraceFormatError(f"call record missing field {key!r}", line_no) from None


def _as_int(value: object, key: str, line_no: Optional[int]) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TraceFormatError(f"field {key!r} must be an integer", line_no)
    return value


def _as_address(value: object, key: str, line_no: Optional[int]) -> int:
    if isinstance(value, str):
        try:
            return int(value, 16)
        except ValueError:
            raise TraceFormatError(
                f"field {key!r} is not a hex address: {value!r}", line_no
            ) from None
    raise TraceFormatError(f"field {key!r} must be a hex string", line_no)


def record_to_call(record: Dict[str, object], line_no: Optional[int] = None) -> GemmCall:
    """Reconstruct a GemmCall from one trace-line dict."""
    routine = _require(record, "routine", line_no)
    if not isinstance(routine, str):
        raise TraceFormatError("field 'routine' must be a string", line_no)
    try:
        elem = routine_elem_size(routine)
    except KeyError:
        raise TraceFormatError(f"unknown routine {routine!r}", line_no) from None

    ta = _require(record, "ta", line_no)
    tb = _require(record, "tb", line_no)
    for key, trans in (("ta", ta), ("tb", tb)):
        if trans not in VALID_TRANS:
            raise TraceFormatError(
                f"field {key!r} must be one of {VALID_TRANS}, got {trans!r}", line_no
            )

    seq = _as_int(_require(record, "seq", line_no), "seq", line_no)
    tid = _as_int(record.get("tid", 0), "tid", line_no)
    m = _as_int(_require(record, "m", line_no), "m", line_no)
    n = _as_int(_require(record, "n", line_no), "n", line_no)
    k = _as_int(_require(record, "k", line_no), "k", line_no)

    dims = {"a": storage_dims(ta, (m, k)), "b": storage_dims(tb, (k, n)), "c": (m, n)}
    operands = {}
    for op_key, ld_key in (("a", "lda"), ("b", "ldb"), ("c", "ldc")):
        rows, cols = dims[op_key]
        address = _as_address(_require(record, op_key, line_no), op_key, line_no)
        ld = _as_int(_require(record, ld_key, line_no), ld_key, line_no)
        try:
            operands[op_key] = MatrixOperand(
                address, rows, cols, ld, elem, op_key.upper()
            )
        except ValueError as exc:
            raise TraceFormatError(f"operand {op_key.upper()}: {exc}", line_no) from None

    t0 = record.get("t0")
    t1 = record.get("t1")
    if t0 is not None:
        t0 = _as_int(t0, "t0", line_no)
    if t1 is not None:
        t1 = _as_int(t1, "t1", line_no)

    try:
        return GemmCall(
            seq=seq,
            routine=routine,
            trans_a=ta,
            trans_b=tb,
            m=m,
            n=n,
            k=k,
            a=operands["a"],
            b=operands["b"],
            c=operands["c"],
            thread_id=tid,
            t_enter_ns=t0,
            t_exit_ns=t1,
        )
    except ValueError as exc:
        raise TraceFormatError(str(exc), line_no) from None


def _encode(record: Dict[str, object]) -> str:
    return json.dumps(record, separators=(",", ":"))


def dumps_trace(trace: Trace) -> str:
    lines = [_encode(trace.header.to_record())]
    lines.extend(_encode(call_to_record(call)) for call in trace.calls)
    lines.append(_encode({"calls": len(trace.calls)}))
    return "\n".join(lines) + "\n"


def dump_trace(trace: Trace, path: Union[str, Path]) -> None:
    Path(path).write_text(dumps_trace(trace))


def _parse_line(line: str, line_no: int) -> Dict[str, object]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceFormatError(f"invalid JSON ({exc.msg})", line_no) from None
    if not isinstance(record, dict):
        raise TraceFormatError("each trace line must be a JSON object", line_no)
    return record


def load_trace_stream(stream: Iterable[str], *, require_footer: bool = False) -> Trace:
    """Parse a trace from an iterable of lines.

    The header must come first and the footer, when present, last and
    consistent with the number of call lines.  A missing footer is
    tolerated unless ``require_footer`` is set (an interrupted recording
    may never have written one), but a wrong count always fails.
    """
    header: Optional[TraceHeader] = None
    calls: List[GemmCall] = []
    footer_count: Optional[int] = None
    prev_seq = 0
    line_no = 0
    for raw in stream:
        line = raw.strip()
        if not line:
            line_no += 1
            continue
        line_no += 1
        record = _parse_line(line, line_no)
        if footer_count is not None:
            raise TraceFormatError("content after footer line", line_no)
        if header is None:
            if "trace_version" not in record:
                raise TraceFormatError(
                    "first line must be a header with 'trace_version'", line_no
                )
            version = record["trace_version"]
            if version != TRACE_VERSION:
                raise TraceFormatError(
                    f"unsupported trace_version {version!r}", line_no
                )
            try:
                header = TraceHeader(
                    page_size=_as_int(
                        record.get("page_size", DEFAULT_PAGE_SIZE), "page_size", line_no
                    ),
                    source=str(record.get("source", "recorded")),
                    machine=str(record.get("machine", "unknown")),
                )
            except ValueError as exc:
                raise TraceFormatError(str(exc), line_no) from None
            continue
        if "calls" in record and "seq" not in record:
            footer_count = _as_int(record["calls"], "calls", line_no)
            if footer_count != len(calls):
                raise TraceFormatError(
                    f"footer says {footer_count} calls, found {len(calls)}", line_no
                )
            continue
        call = record_to_call(record, line_no)
        if call.seq <= prev_seq:
            raise TraceFormatError(
                f"seq {call.seq} not strictly increasing after {prev_seq}", line_no
            )
        prev_seq = call.seq
        calls.append(call)
    if header is None:
        raise TraceFormatError("empty trace: no header line")
    if footer_count is None and require_footer:
        raise TraceFormatError("missing footer line (truncated trace?)", line_no)
    return Trace(header=header, calls=tuple(calls))


def loads_trace(text: str, *, require_footer: bool = False) -> Trace:
    return load_trace_stream(io.StringIO(text), require_footer=require_footer)


def load_trace(path: Union[str, Path], *, require_footer: bool = False) -> Trace:
    try:
        handle = open(path, "r")
    except OSError as exc:
        raise TraceFormatError(f"cannot open trace: {exc}") from None
    with handle:
        return load_trace_stream(handle, require_footer=require_footer)


class TraceWriter:
    """Incremental, thread-safe trace writer used by the interposer.

    Writes the header on construction, one line per recorded call, and
    the footer on close().  ``bytes_written`` counts everything sent to
    the file so far.
    """

    def __init__(self, path: Union[str, Path], header: TraceHeader) -> None:
        self._fh: Optional[TextIO] = open(path, "w")
        self._lock = threading.Lock()
        self._calls = 0
        self._bytes = 0
        self.path = str(path)
        self.header = header
        self._write_line(_encode(header.to_record()))

    def _write_line(self, line: str) -> None:
        assert self._fh is not None
        self._fh.write(line + "\n")
        self._bytes += len(line) + 1

    @property
    def calls_written(self) -> int:
        with self._lock:
            return self._calls

    @property
    def bytes_written(self) -> int:
        with self._lock:
            return self._bytes

    @property
    def closed(self) -> bool:
        return self._fh is None

    def write_call(self, call: GemmCall) -> None:
        line = _encode(call_to_record(call))
        with self._lock:
            if self._fh is None:
                raise ValueError("trace writer already closed")
            self._write_line(line)
            self._calls += 1

    def close(self) -> None:
        """Write the footer and release the file; safe to call twice."""
        with self._lock:
            if self._fh is None:
                return
            self._write_line(_encode({"calls": self._calls}))
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()
