"""Calibrated analytic cost model for gemm offload on one machine.

A HardwareProfile holds throughput/bandwidth constants calibrated from
measurements of a fixed workload (dgemm, 'T'/'N', m=32, n=2400, k=93536,
double precision) on two reference machines: a unified-memory CPU-GPU
superchip ("gh200") and a conventional PCIe-attached GPU host
("h100_pcie").  cost() prices one call under a data-management strategy:

* copy-per-call pays the staged A+B+2C transfer over the copy link plus
  the kernel on device-allocated memory, plus a fixed per-call overhead.
* unified access pays only the kernel, at the rate of whichever memory
  holds the data.
* first-touch migration pays migration for pages not yet resident (via
  the residency registry) plus the kernel on migrated pages.

Two device-memory gemm rates coexist on purpose: kernels on freshly
device-allocated buffers run measurably faster than on host-allocated
pages that ended up in device memory, so each strategy picks the rate
matching how its data got there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

from .model import (
    Decision,
    GemmCall,
    Residence,
    Strategy,
    StrategyKind,
    Verdict,
    flop_count,
    routine_flop_factor,
)
from .residency import ResidencyRegistry


class ProfileError(ValueError):
    """A hardware profile could not be resolved or parsed."""


class ProfileNotFoundError(ProfileError):
    """The requested profile is neither built in nor a readable file."""


class Processor(Enum):
    CPU = "CPU"
    GPU = "GPU"


StreamTable = Dict[str, Dict[str, Dict[str, float]]]


@dataclass(frozen=True)
class HardwareProfile:
    """Constants describing one machine for the analytic model.

    Rates are effective gemm throughputs (flops/s) by processor and data
    placement; bandwidths are bytes/s.  ``stream_table`` carries measured
    STREAM bandwidths (GB/s) keyed processor -> memory -> kernel, for
    calibration and reporting only — no cost formula consumes it.
    """

    name: str
    cpu_gemm_rate: float
    gpu_gemm_rate_hbm: float
    gpu_gemm_rate_hbm_hostalloc: float
    gpu_gemm_rate_hostmem: float
    cpu_rate_on_device_mem: float
    link_bandwidth: float
    migration_bandwidth: float
    per_call_overhead: float
    stream_table: StreamTable = field(default_factory=dict)
    notes: str = ""

    def __post_init__(self) -> None:
        if not self.name:
            raise ProfileError("profile needs a name")
        for attr in (
            "cpu_gemm_rate",
            "gpu_gemm_rate_hbm",
            "gpu_gemm_rate_hbm_hostalloc",
            "gpu_gemm_rate_hostmem",
            "cpu_rate_on_device_mem",
            "link_bandwidth",
            "migration_bandwidth",
        ):
            value = getattr(self, attr)
            if not value > 0:
                raise ProfileError(f"{self.name}: {attr} must be positive")
        if self.per_call_overhead < 0:
            raise ProfileError(f"{self.name}: per_call_overhead must be >= 0")

    def to_dict(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "cpu_gemm_rate": self.cpu_gemm_rate,
            "gpu_gemm_rate_hbm": self.gpu_gemm_rate_hbm,
            "gpu_gemm_rate_hbm_hostalloc": self.gpu_gemm_rate_hbm_hostalloc,
            "gpu_gemm_rate_hostmem": self.gpu_gemm_rate_hostmem,
            "cpu_rate_on_device_mem": self.cpu_rate_on_device_mem,
            "link_bandwidth": self.link_bandwidth,
            "migration_bandwidth": self.migration_bandwidth,
            "per_call_overhead": self.per_call_overhead,
            "stream_table": self.stream_table,
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "HardwareProfile":
        """Build a profile from a JSON-shaped mapping.

        Only name, cpu_gemm_rate, gpu_gemm_rate_hbm and link_bandwidth are
        required; optional placement rates fall back to the closest
        required one and migration_bandwidth to the link bandwidth.
        """
        try:
            name = str(data["name"])
            cpu_rate = float(data["cpu_gemm_rate"])  # type: ignore[arg-type]
            gpu_hbm = float(data["gpu_gemm_rate_hbm"])  # type: ignore[arg-type]
            link = float(data["link_bandwidth"])  # type: ignore[arg-type]
        except KeyError as exc:
            raise ProfileError(f"profile missing required field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ProfileError(f"profile field not numeric: {exc}") from None

        def opt(key: str, default: float) -> float:
            raw = data.get(key)
            return default if raw is None else float(raw)  # type: ignore[arg-type]

        try:
            return cls(
                name=name,
                cpu_gemm_rate=cpu_rate,
                gpu_gemm_rate_hbm=gpu_hbm,
                gpu_gemm_rate_hbm_hostalloc=opt("gpu_gemm_rate_hbm_hostalloc", gpu_hbm),
                gpu_gemm_rate_hostmem=opt("gpu_gemm_rate_hostmem", cpu_rate),
                cpu_rate_on_device_mem=opt("cpu_rate_on_device_mem", cpu_rate),
                link_bandwidth=link,
                migration_bandwidth=opt("migration_bandwidth", link),
                per_call_overhead=opt("per_call_overhead", 0.0),
                stream_table=dict(data.get("stream_table") or {}),  # type: ignore[arg-type]
                notes=str(data.get("notes") or ""),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"profile field not numeric: {exc}") from None

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HardwareProfile":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ProfileNotFoundError(f"cannot read profile file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ProfileError(f"profile file is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ProfileError("profile file must hold a JSON object")
        return cls.from_dict(data)


@dataclass(frozen=True)
class CostBreakdown:
    """Per-call time components (seconds) and data movement (bytes)."""

    transfer_s: float = 0.0
    kernel_s: float = 0.0
    migration_s: float = 0.0
    other_s: float = 0.0
    bytes_moved: int = 0
    executed_on: Processor = Processor.CPU

    def __post_init__(self) -> None:
        for attr in ("transfer_s", "kernel_s", "migration_s", "other_s"):
            if getattr(self, attr) < 0:
                raise ValueError(f"{attr} must be >= 0")
        if self.bytes_moved < 0:
            raise ValueError("bytes_moved must be >= 0")

    def total(self) -> float:
        return self.transfer_s + self.kernel_s + self.migration_s + self.other_s


# --- built-in calibration ----------------------------------------------------
#
# Reference workload: dgemm 'T','N' with m=32, n=2400, k=93536 (double).
# All rates below are that workload's flop count divided by a measured
# runtime; bandwidths are quoted hardware numbers.

CALIBRATION_DIMS = (32, 2400, 93536)
CALIBRATION_FLOPS = 2 * 32 * 2400 * 93536  # 14_367_129_600
CALIBRATION_COPY_BYTES = 1_821_065_216  # A + B + 2*C at tight leading dims

# Measured dgemm runtimes (seconds) on the unified-memory superchip, by
# processor and data placement.
_UMA_CPU_HOSTMEM_S = 19.7e-3
_UMA_CPU_DEVICEMEM_S = 24.9e-3
_UMA_GPU_HOSTMEM_S = 19.7e-3
_UMA_GPU_DEVALLOC_S = 0.52e-3  # device-allocated device memory
_UMA_GPU_HOSTALLOC_S = 0.84e-3  # host-allocated pages resident in device memory
_UMA_LINK_BPS = 370e9
_UMA_OTHER_S = 0.02e-3

# Measured on the PCIe machine: kernel time on device memory, nominal link.
_PCIE_GPU_DEVALLOC_S = 0.99e-3
_PCIE_LINK_BPS = 64e9
_PCIE_OTHER_S = 0.02e-3

# Measured STREAM bandwidths (GB/s) on the unified-memory superchip.
_UMA_STREAM: StreamTable = {
    "CPU": {
        "HostMem": {"Copy": 312.71, "Scale": 305.65, "Add": 314.47, "Triad": 314.59},
        "DeviceMem": {"Copy": 129.61, "Scale": 130.62, "Add": 125.93, "Triad": 125.94},
    },
    "GPU": {
        "HostMem": {"Copy": 318.26, "Scale": 318.37, "Add": 477.91, "Triad": 477.24},
        "DeviceMem": {"Copy": 3421.95, "Scale": 3417.83, "Add": 3741.64, "Triad": 3739.18},
    },
}


def builtin_profiles() -> Dict[str, HardwareProfile]:
    """The two bundled machine profiles, freshly constructed."""
    flops = float(CALIBRATION_FLOPS)
    gh200 = HardwareProfile(
        name="gh200",
        cpu_gemm_rate=flops / _UMA_CPU_HOSTMEM_S,
        gpu_gemm_rate_hbm=flops / _UMA_GPU_DEVALLOC_S,
        gpu_gemm_rate_hbm_hostalloc=flops / _UMA_GPU_HOSTALLOC_S,
        gpu_gemm_rate_hostmem=flops / _UMA_GPU_HOSTMEM_S,
        cpu_rate_on_device_mem=flops / _UMA_CPU_DEVICEMEM_S,
        link_bandwidth=_UMA_LINK_BPS,
        migration_bandwidth=_UMA_LINK_BPS,
        per_call_overhead=_UMA_OTHER_S,
        stream_table={p: {m: dict(k) for m, k in mem.items()} for p, mem in _UMA_STREAM.items()},
        notes=(
            "Unified-memory CPU-GPU superchip. Gemm rates calibrated from "
            "the reference dgemm workload; migration bandwidth assumed "
            "equal to the coherent-link copy bandwidth."
        ),
    )
    h100 = HardwareProfile(
        name="h100_pcie",
        cpu_gemm_rate=flops / _UMA_CPU_HOSTMEM_S,
        gpu_gemm_rate_hbm=flops / _PCIE_GPU_DEVALLOC_S,
        gpu_gemm_rate_hbm_hostalloc=flops / _PCIE_GPU_DEVALLOC_S,
        gpu_gemm_rate_hostmem=flops / _PCIE_GPU_DEVALLOC_S,
        cpu_rate_on_device_mem=flops / _UMA_CPU_HOSTMEM_S,
        link_bandwidth=_PCIE_LINK_BPS,
        migration_bandwidth=_PCIE_LINK_BPS,
        per_call_overhead=_PCIE_OTHER_S,
        notes=(
            "PCIe-attached GPU host. Link bandwidth is the nominal 64 GB/s; "
            "measured copies achieve ~57 GB/s (use calibrate to fit the "
            "effective rate). No coherent CPU-GPU path exists, so the "
            "unified-access and CPU-on-device rates are notional stand-ins."
        ),
    )
    return {"gh200": gh200, "h100_pcie": h100}


def resolve_profile(spec: str) -> HardwareProfile:
    """Resolve a profile by built-in name or by JSON file path."""
    profiles = builtin_profiles()
    if spec in profiles:
        return profiles[spec]
    path = Path(spec)
    if path.exists():
        return HardwareProfile.load(path)
    raise ProfileNotFoundError(
        f"unknown profile {spec!r}: not one of {sorted(profiles)} and not a file"
    )


def strategy1_bytes(call: GemmCall) -> int:
    """Bytes staged by copy-per-call: A and B over, C over and back."""
    return call.a.region_bytes + call.b.region_bytes + 2 * call.c.region_bytes


def cost(
    call: GemmCall,
    strat: Strategy,
    profile: HardwareProfile,
    registry: Optional[ResidencyRegistry] = None,
    decision: Optional[Decision] = None,
) -> CostBreakdown:
    """Price one call under a strategy, honoring the offload decision.

    The registry is consulted/updated only for first-touch migration with
    an offload verdict; a migration denied for capacity falls back to
    copy-per-call pricing for that call, leaving the registry unchanged.
    """
    if decision is None:
        raise ValueError("cost() needs the offload decision for the call")
    flops = flop_count(call)

    if decision.verdict is Verdict.HOST:
        if strat.kind is StrategyKind.UNIFIED_ACCESS and strat.residence is Residence.DEVICE_MEMORY:
            rate = profile.cpu_rate_on_device_mem
        else:
            rate = profile.cpu_gemm_rate
        return CostBreakdown(kernel_s=flops / rate, executed_on=Processor.CPU)

    if strat.kind is StrategyKind.COPY_PER_CALL:
        return _copy_per_call_cost(call, flops, profile)

    if strat.kind is StrategyKind.UNIFIED_ACCESS:
        if strat.residence is Residence.HOST_MEMORY:
            rate = profile.gpu_gemm_rate_hostmem
        else:
            rate = profile.gpu_gemm_rate_hbm_hostalloc
        return CostBreakdown(kernel_s=flops / rate, executed_on=Processor.GPU)

    # first-touch migration
    if registry is None:
        raise ValueError("first-touch migration needs a residency registry")
    actions, denied_needed = registry.touch_call(call.operands)
    if denied_needed is not None:
        return _copy_per_call_cost(call, flops, profile)
    moved = sum(action.bytes for action in actions)
    return CostBreakdown(
        kernel_s=flops / profile.gpu_gemm_rate_hbm_hostalloc,
        migration_s=moved / profile.migration_bandwidth,
        bytes_moved=moved,
        executed_on=Processor.GPU,
    )


def _copy_per_call_cost(
    call: GemmCall, flops: int, profile: HardwareProfile
) -> CostBreakdown:
    moved = strategy1_bytes(call)
    return CostBreakdown(
        transfer_s=moved / profile.link_bandwidth,
        kernel_s=flops / profile.gpu_gemm_rate_hbm,
        other_s=profile.per_call_overhead,
        bytes_moved=moved,
        executed_on=Processor.GPU,
    )


# --- calibration from measurement files --------------------------------------

class CalibrationError(Exception):
    """Measurements underdetermine the profile; lists the missing classes."""

    def __init__(self, missing: Sequence[str]) -> None:
        self.missing = tuple(missing)
        super().__init__(
            "measurements underdetermined; missing classes: " + ", ".join(self.missing)
        )


# measurement placement -> profile field fitted from it
GEMM_PLACEMENTS = {
    "cpu_hostmem": "cpu_gemm_rate",
    "cpu_devicemem": "cpu_rate_on_device_mem",
    "gpu_hostmem": "gpu_gemm_rate_hostmem",
    "gpu_devicealloc": "gpu_gemm_rate_hbm",
    "gpu_hostalloc": "gpu_gemm_rate_hbm_hostalloc",
}
TRANSFER_PATHS = {"link": "link_bandwidth", "migration": "migration_bandwidth"}

# a stand-alone calibration (no base profile) must pin these
REQUIRED_CLASSES = ("gemm/cpu_hostmem", "gemm/gpu_devicealloc", "transfer/link")


def _fit_rate(points: Sequence[Tuple[float, float]]) -> float:
    """Least-squares rate for time = work/rate through the origin.

    Minimizing sum((t_i - work_i/rate)^2) over 1/rate gives
    rate = sum(work^2) / sum(work*time); one point reduces to work/time.
    """
    num = sum(work * work for work, _ in points)
    den = sum(work * t for work, t in points)
    if den <= 0:
        raise ProfileError("measurement times must be positive")
    return num / den


def fit_profile(
    doc: Mapping[str, object], base: Optional[HardwareProfile] = None
) -> HardwareProfile:
    """Fit profile constants from a measurements document.

    The document holds ``{"name": ..., "measurements": [...]}`` where each
    measurement is one of::

        {"kind": "gemm", "placement": "cpu_hostmem", "routine": "dgemm",
         "m": 32, "n": 2400, "k": 93536, "time_s": 0.0197}
        {"kind": "transfer", "path": "link", "bytes": 1821065216,
         "time_s": 0.03179}
        {"kind": "overhead", "time_s": 2e-5}
        {"kind": "stream", "processor": "CPU", "memory": "HostMem",
         "kernel": "Copy", "gbps": 312.71}

    Each class is fitted by least squares through the origin.  With a
    ``base`` profile, fitted classes override its fields and the rest
    carry over; without one, the classes in REQUIRED_CLASSES must all be
    present or CalibrationError lists the missing ones.
    """
    measurements = doc.get("measurements")
    if not isinstance(measurements, list):
        raise ProfileError("measurements document needs a 'measurements' list")

    gemm_points: Dict[str, list] = {key: [] for key in GEMM_PLACEMENTS}
    transfer_points: Dict[str, list] = {key: [] for key in TRANSFER_PATHS}
    overhead_times: list = []
    stream_table: StreamTable = {}

    for index, raw in enumerate(measurements):
        if not isinstance(raw, dict):
            raise ProfileError(f"measurement #{index} is not an object")
        kind = raw.get("kind")
        try:
            if kind == "gemm":
                placement = raw["placement"]
                if placement not in GEMM_PLACEMENTS:
                    raise ProfileError(
                        f"measurement #{index}: unknown placement {placement!r}"
                    )
                factor = routine_flop_factor(str(raw.get("routine", "dgemm")))
                work = factor * int(raw["m"]) * int(raw["n"]) * int(raw["k"])
                gemm_points[placement].append((float(work), float(raw["time_s"])))
            elif kind == "transfer":
                path = raw.get("path", "link")
                if path not in TRANSFER_PATHS:
                    raise ProfileError(f"measurement #{index}: unknown path {path!r}")
                transfer_points[path].append(
                    (float(raw["bytes"]), float(raw["time_s"]))
                )
            elif kind == "overhead":
                overhead_times.append(float(raw["time_s"]))
            elif kind == "stream":
                processor = str(raw["processor"])
                memory = str(raw["memory"])
                kernel = str(raw["kernel"])
                stream_table.setdefault(processor, {}).setdefault(memory, {})[
                    kernel
                ] = float(raw["gbps"])
            else:
                raise ProfileError(f"measurement #{index}: unknown kind {kind!r}")
        except KeyError as exc:
            raise ProfileError(
                f"measurement #{index} missing field {exc.args[0]!r}"
            ) from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ProfileError):
                raise
            raise ProfileError(f"measurement #{index}: {exc}") from None

    if base is None:
        missing = []
        for cls in REQUIRED_CLASSES:
            kind, _, key = cls.partition("/")
            points = gemm_points[key] if kind == "gemm" else transfer_points[key]
            if not points:
                missing.append(cls)
        if missing:
            raise CalibrationError(missing)

    fields: Dict[str, object] = dict(base.to_dict()) if base is not None else {}
    fields["name"] = str(doc.get("name") or fields.get("name") or "calibrated")
    for placement, attr in GEMM_PLACEMENTS.items():
        if gemm_points[placement]:
            fields[attr] = _fit_rate(gemm_points[placement])
    for path, attr in TRANSFER_PATHS.items():
        if transfer_points[path]:
            fields[attr] = _fit_rate(transfer_points[path])
    if overhead_times:
        fields["per_call_overhead"] = sum(overhead_times) / len(overhead_times)
    if stream_table:
        merged: StreamTable = {
            p: {m: dict(k) for m, k in mem.items()}
            for p, mem in (fields.get("stream_table") or {}).items()  # type: ignore[union-attr]
        }
        for processor, memories in stream_table.items():
            for memory, kernels in memories.items():
                merged.setdefault(processor, {}).setdefault(memory, {}).update(kernels)
        fields["stream_table"] = merged
    return HardwareProfile.from_dict(fields)
