"""Offload decision rule and its environment-variable configuration.

A call is sent to the device exactly when its routine is enabled and the
effective problem size (m*n*k)**(1/3) strictly exceeds the threshold.
The comparison is done in exact rational arithmetic so boundary cases
(e.g. m = n = k = threshold) never depend on float rounding.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Dict, FrozenSet, Mapping, Optional

from .model import Decision, FIRST_TOUCH_MIGRATE, GemmCall, Reason, Strategy

DEFAULT_THRESHOLD = 500.0
DEFAULT_PAGE_SIZE = 4096
DEFAULT_DEVICE_CAPACITY = 96 * 2**30  # bytes of device memory
GEMM_ROUTINES: FrozenSet[str] = frozenset({"sgemm", "dgemm", "cgemm", "zgemm"})

ENV_PREFIX = "SCILIB_"
ENV_STRATEGY = "SCILIB_STRATEGY"
ENV_THRESHOLD = "SCILIB_THRESHOLD"
ENV_ROUTINES = "SCILIB_ROUTINES"
ENV_DEBUG = "SCILIB_DEBUG"
ENV_PAGE_SIZE = "SCILIB_PAGE_SIZE"
ENV_DEVICE_CAPACITY = "SCILIB_DEVICE_CAPACITY"
ENV_TRACE = "SCILIB_TRACE"


class ConfigParseError(ValueError):
    """An environment variable holds a value that cannot be used."""


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass(frozen=True)
class OffloadConfig:
    """Validated runtime configuration for interception and replay."""

    strategy: Strategy = FIRST_TOUCH_MIGRATE
    threshold: float = DEFAULT_THRESHOLD
    enabled_routines: FrozenSet[str] = GEMM_ROUTINES
    debug_level: int = 0
    page_size: int = DEFAULT_PAGE_SIZE
    device_capacity: int = DEFAULT_DEVICE_CAPACITY
    trace_path: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.threshold > 0:
            raise ValueError("threshold must be positive")
        if not _is_power_of_two(self.page_size):
            raise ValueError("page_size must be a positive power of two")
        if self.device_capacity <= 0:
            raise ValueError("device_capacity must be positive")
        if not 0 <= self.debug_level <= 3:
            raise ValueError("debug_level must be in 0..3")
        if not isinstance(self.enabled_routines, frozenset):
            object.__setattr__(
                self, "enabled_routines", frozenset(self.enabled_routines)
            )

    def with_threshold(self, threshold: float) -> "OffloadConfig":
        return replace(self, threshold=threshold)


def effective_size(m: int, n: int, k: int) -> float:
    """Geometric mean of the three gemm dimensions, (m*n*k)**(1/3)."""
    return float(m * n * k) ** (1.0 / 3.0)


def exceeds_threshold(m: int, n: int, k: int, threshold: float) -> bool:
    """Exact test for (m*n*k)**(1/3) > threshold.

    Equivalent to m*n*k > threshold**3; evaluated over the rationals
    because the float cube root of a perfect cube can land on either
    side of an integer threshold.
    """
    return Fraction(m) * n * k > Fraction(threshold) ** 3


def decide(routine: str, m: int, n: int, k: int, cfg: OffloadConfig) -> Decision:
    """Apply the offload rule to a routine name and dimension triple."""
    if routine not in cfg.enabled_routines:
        return Decision.host(Reason.ROUTINE_DISABLED)
    if not exceeds_threshold(m, n, k, cfg.threshold):
        return Decision.host(Reason.BELOW_THRESHOLD)
    return Decision.offload()


def should_offload(call: GemmCall, cfg: OffloadConfig) -> Decision:
    """Apply the offload rule to a call."""
    return decide(call.routine, call.m, call.n, call.k, cfg)


def _parse_int(env: Mapping[str, str], var: str, default: int) -> int:
    raw = env.get(var)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw.strip(), 0)
    except ValueError:
        raise ConfigParseError(f"{var}: invalid integer {raw!r}") from None


def parse_config(env: Optional[Mapping[str, str]] = None) -> OffloadConfig:
    """Build an OffloadConfig from SCILIB_* environment variables.

    Unset or empty variables fall back to the defaults; malformed values
    raise ConfigParseError naming the offending variable.
    """
    if env is None:
        env = os.environ

    strategy = FIRST_TOUCH_MIGRATE
    raw = env.get(ENV_STRATEGY)
    if raw is not None and raw.strip() != "":
        try:
            strategy = Strategy.from_code(raw)
        except ValueError as exc:
            raise ConfigParseError(f"{ENV_STRATEGY}: {exc}") from None

    threshold = DEFAULT_THRESHOLD
    raw = env.get(ENV_THRESHOLD)
    if raw is not None and raw.strip() != "":
        try:
            threshold = float(raw.strip())
        except ValueError:
            raise ConfigParseError(
                f"{ENV_THRESHOLD}: invalid numeric value {raw!r}"
            ) from None
        if not threshold > 0:
            raise ConfigParseError(f"{ENV_THRESHOLD}: must be positive, got {raw!r}")

    routines = GEMM_ROUTINES
    raw = env.get(ENV_ROUTINES)
    if raw is not None and raw.strip() != "":
        if raw.strip().lower() == "all":
            routines = GEMM_ROUTINES
        else:
            names = [tok.strip().lower() for tok in raw.split(",")]
            if any(not tok for tok in names):
                raise ConfigParseError(
                    f"{ENV_ROUTINES}: empty routine name in {raw!r}"
                )
            routines = frozenset(names)

    debug = _parse_int(env, ENV_DEBUG, 0)
    page_size = _parse_int(env, ENV_PAGE_SIZE, DEFAULT_PAGE_SIZE)
    capacity = _parse_int(env, ENV_DEVICE_CAPACITY, DEFAULT_DEVICE_CAPACITY)
    trace_path = env.get(ENV_TRACE) or None

    try:
        return OffloadConfig(
            strategy=strategy,
            threshold=threshold,
            enabled_routines=routines,
            debug_level=debug,
            page_size=page_size,
            device_capacity=capacity,
            trace_path=trace_path,
        )
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from None


def config_to_env(cfg: OffloadConfig) -> Dict[str, str]:
    """Environment dict that parse_config maps back to ``cfg``."""
    env = {
        ENV_STRATEGY: cfg.strategy.code,
        ENV_THRESHOLD: repr(cfg.threshold),
        ENV_ROUTINES: (
            "all"
            if cfg.enabled_routines == GEMM_ROUTINES
            else ",".join(sorted(cfg.enabled_routines))
        ),
        ENV_DEBUG: str(cfg.debug_level),
        ENV_PAGE_SIZE: str(cfg.page_size),
        ENV_DEVICE_CAPACITY: str(cfg.device_capacity),
    }
    if cfg.trace_path is not None:
        env[ENV_TRACE] = cfg.trace_path
    return env
