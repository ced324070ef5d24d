"""Page-granular device-residency tracking with first-touch migration.

Pages of a region migrate to the device the first time the accelerator
uses them and stay resident until explicitly evicted; per-page touch
counters record reuse.  Bookkeeping is interval-based so regions spanning
hundreds of thousands of pages stay cheap, but the semantics are exactly
those of a per-page set plus a per-page counter.
"""

from __future__ import annotations

import bisect
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

from .model import MatrixOperand
from .policy import DEFAULT_DEVICE_CAPACITY, DEFAULT_PAGE_SIZE


class EmptyRegionError(ValueError):
    """A zero-length region has no pages to map."""


@dataclass(frozen=True)
class PageRange:
    """Inclusive range of page numbers, first_page <= last_page."""

    first_page: int
    last_page: int

    def __post_init__(self) -> None:
        if self.first_page < 0:
            raise ValueError("first_page must be non-negative")
        if self.last_page < self.first_page:
            raise ValueError("last_page precedes first_page")

    @property
    def count(self) -> int:
        return self.last_page - self.first_page + 1

    def pages(self) -> range:
        return range(self.first_page, self.last_page + 1)


def pages_for(base_address: int, length_bytes: int, page_size: int) -> PageRange:
    """Pages overlapped by [base_address, base_address + length_bytes).

    first = floor(base / page), last = floor((base + length - 1) / page);
    a region of one byte still occupies one page.
    """
    if length_bytes <= 0:
        raise EmptyRegionError(f"region of {length_bytes} bytes has no pages")
    if base_address < 0:
        raise ValueError("base_address must be non-negative")
    if page_size <= 0 or page_size & (page_size - 1):
        raise ValueError("page_size must be a positive power of two")
    return PageRange(
        base_address // page_size,
        (base_address + length_bytes - 1) // page_size,
    )


class MigrationOutcome(Enum):
    MIGRATED = "Migrated"
    ALREADY_RESIDENT = "AlreadyResident"
    DENIED = "Denied"


@dataclass(frozen=True)
class MigrationAction:
    """What one touch did: pages newly moved, or nothing, or refused."""

    outcome: MigrationOutcome
    new_pages: int = 0
    bytes: int = 0
    needed_bytes: int = 0

    @classmethod
    def migrated(cls, new_pages: int, page_size: int) -> "MigrationAction":
        return cls(MigrationOutcome.MIGRATED, new_pages, new_pages * page_size)

    @classmethod
    def already_resident(cls) -> "MigrationAction":
        return cls(MigrationOutcome.ALREADY_RESIDENT)

    @classmethod
    def denied(cls, needed_bytes: int) -> "MigrationAction":
        return cls(MigrationOutcome.DENIED, needed_bytes=needed_bytes)


@dataclass(frozen=True)
class ReuseStats:
    """Aggregate migration and reuse summary for one registry."""

    migrated_bytes: int
    mean_touches_per_page: float
    max_touches: int


class _IntervalSet:
    """Sorted, disjoint, inclusive integer intervals.

    Internal helper: parallel start/end arrays kept merged, with a running
    element count.  All query and edit operations bisect to the overlap
    window, so costs scale with the number of intervals, not pages.
    """

    __slots__ = ("_starts", "_ends", "_total")

    def __init__(self) -> None:
        self._starts: List[int] = []
        self._ends: List[int] = []
        self._total = 0

    @property
    def total(self) -> int:
        return self._total

    def __contains__(self, value: int) -> bool:
        idx = bisect.bisect_right(self._starts, value) - 1
        return idx >= 0 and self._ends[idx] >= value

    def intervals(self) -> Iterator[Tuple[int, int]]:
        return zip(self._starts, self._ends)

    def _overlap_window(self, lo: int, hi: int) -> Tuple[int, int]:
        # intervals intersecting [lo, hi]: end >= lo and start <= hi
        i = bisect.bisect_left(self._ends, lo)
        j = bisect.bisect_right(self._starts, hi)
        return i, j

    def missing(self, lo: int, hi: int) -> List[Tuple[int, int]]:
        """Maximal subranges of [lo, hi] not currently in the set."""
        i, j = self._overlap_window(lo, hi)
        gaps: List[Tuple[int, int]] = []
        cursor = lo
        for idx in range(i, j):
            start, end = self._starts[idx], self._ends[idx]
            if start > cursor:
                gaps.append((cursor, start - 1))
            cursor = max(cursor, end + 1)
            if cursor > hi:
                break
        if cursor <= hi:
            gaps.append((cursor, hi))
        return gaps

    def covered(self, lo: int, hi: int) -> int:
        i, j = self._overlap_window(lo, hi)
        total = 0
        for idx in range(i, j):
            total += min(hi, self._ends[idx]) - max(lo, self._starts[idx]) + 1
        return total

    def add(self, lo: int, hi: int) -> int:
        """Insert [lo, hi]; returns how many values were new."""
        if hi < lo:
            raise ValueError("empty interval")
        i, j = self._overlap_window(lo, hi)
        # widen to adjacent intervals so the set stays merged
        if i > 0 and self._ends[i - 1] == lo - 1:
            i -= 1
        if j < len(self._starts) and self._starts[j] == hi + 1:
            j += 1
        if i == j:
            self._starts.insert(i, lo)
            self._ends.insert(i, hi)
            self._total += hi - lo + 1
            return hi - lo + 1
        new_lo = min(lo, self._starts[i])
        new_hi = max(hi, self._ends[j - 1])
        absorbed = sum(
            self._ends[idx] - self._starts[idx] + 1 for idx in range(i, j)
        )
        self._starts[i:j] = [new_lo]
        self._ends[i:j] = [new_hi]
        added = (new_hi - new_lo + 1) - absorbed
        self._total += added
        return added

    def remove(self, lo: int, hi: int) -> int:
        """Delete [lo, hi] from the set; returns how many values left."""
        if hi < lo:
            raise ValueError("empty interval")
        i, j = self._overlap_window(lo, hi)
        if i >= j:
            return 0
        removed = 0
        repl_starts: List[int] = []
        repl_ends: List[int] = []
        for idx in range(i, j):
            start, end = self._starts[idx], self._ends[idx]
            removed += min(hi, end) - max(lo, start) + 1
            if start < lo:
                repl_starts.append(start)
                repl_ends.append(lo - 1)
            if end > hi:
                repl_starts.append(hi + 1)
                repl_ends.append(end)
        self._starts[i:j] = repl_starts
        self._ends[i:j] = repl_ends
        self._total -= removed
        return removed


class ResidencyRegistry:
    """Tracks which pages are device-resident and how often they are used.

    Thread-safe.  ``touch`` admits one region at a time and refuses (with
    ``Denied``) any migration that would push resident bytes past the
    capacity, leaving the registry unchanged.  ``touch_call`` admits all
    operands of one call atomically: either every operand is touched or
    none is.  Touch counts survive eviction so reuse statistics describe
    the whole run.
    """

    def __init__(
        self,
        page_size: int = DEFAULT_PAGE_SIZE,
        capacity_bytes: int = DEFAULT_DEVICE_CAPACITY,
    ) -> None:
        if page_size <= 0 or page_size & (page_size - 1):
            raise ValueError("page_size must be a positive power of two")
        if capacity_bytes <= 0:
            raise ValueError("capacity_bytes must be positive")
        self.page_size = page_size
        self.capacity_bytes = capacity_bytes
        self._lock = threading.Lock()
        self._resident = _IntervalSet()
        self._touches: Dict[Tuple[int, int], int] = {}
        self._migrated_bytes = 0

    # -- queries ---------------------------------------------------------

    @property
    def resident_page_count(self) -> int:
        with self._lock:
            return self._resident.total

    @property
    def resident_bytes(self) -> int:
        with self._lock:
            return self._resident.total * self.page_size

    @property
    def migrated_bytes_total(self) -> int:
        with self._lock:
            return self._migrated_bytes

    def is_resident(self, page: int) -> bool:
        with self._lock:
            return page in self._resident

    def resident_pages(self) -> "set[int]":
        """Materialized page set; intended for tests and small registries."""
        with self._lock:
            out: set = set()
            for lo, hi in self._resident.intervals():
                out.update(range(lo, hi + 1))
            return out

    def touch_counts(self) -> Dict[int, int]:
        """Materialized page -> touch count map (cost is O(pages touched))."""
        with self._lock:
            counts: Dict[int, int] = {}
            for pos, level, span in self._sweep_locked():
                for page in range(pos, pos + span):
                    counts[page] = level
            return counts

    # -- edits -----------------------------------------------------------

    def touch(self, operand: MatrixOperand) -> MigrationAction:
        """Present one operand's region to the device for first-touch."""
        return self.touch_region(operand.base_address, operand.region_bytes)

    def touch_region(self, base_address: int, length_bytes: int) -> MigrationAction:
        with self._lock:
            return self._touch_locked(base_address, length_bytes)

    def touch_call(
        self, operands: Sequence[MatrixOperand]
    ) -> Tuple[List[MigrationAction], Optional[int]]:
        """Touch every operand of one call, atomically admitted.

        Returns ``(actions, None)`` on success.  If migrating the combined
        not-yet-resident pages would exceed capacity, returns
        ``([], needed_bytes)`` and leaves the registry untouched.
        """
        with self._lock:
            pending = _IntervalSet()
            for op in operands:
                rng = pages_for(op.base_address, op.region_bytes, self.page_size)
                for lo, hi in self._resident.missing(rng.first_page, rng.last_page):
                    pending.add(lo, hi)
            needed = pending.total * self.page_size
            if needed and self._resident_bytes_locked() + needed > self.capacity_bytes:
                return [], needed
            return [
                self._touch_locked(op.base_address, op.region_bytes)
                for op in operands
            ], None

    def evict(self, page_range: PageRange) -> int:
        """Drop the range from residency; returns pages actually evicted.

        Touch counts are retained.
        """
        with self._lock:
            return self._resident.remove(page_range.first_page, page_range.last_page)

    def evict_region(self, base_address: int, length_bytes: int) -> int:
        return self.evict(pages_for(base_address, length_bytes, self.page_size))

    def reuse_stats(self) -> ReuseStats:
        """Summary over all pages ever touched (evicted ones included)."""
        with self._lock:
            if not self._touches:
                return ReuseStats(self._migrated_bytes, 0.0, 0)
            touched_pages = 0
            touch_units = 0
            max_level = 0
            for _pos, level, span in self._sweep_locked():
                touched_pages += span
                touch_units += level * span
                if level > max_level:
                    max_level = level
            return ReuseStats(
                self._migrated_bytes,
                touch_units / touched_pages,
                max_level,
            )

    # -- internals -------------------------------------------------------

    def _resident_bytes_locked(self) -> int:
        return self._resident.total * self.page_size

    def _touch_locked(self, base_address: int, length_bytes: int) -> MigrationAction:
        rng = pages_for(base_address, length_bytes, self.page_size)
        gaps = self._resident.missing(rng.first_page, rng.last_page)
        new_pages = sum(hi - lo + 1 for lo, hi in gaps)
        if new_pages:
            needed = new_pages * self.page_size
            if self._resident_bytes_locked() + needed > self.capacity_bytes:
                return MigrationAction.denied(needed)
            for lo, hi in gaps:
                self._resident.add(lo, hi)
            self._migrated_bytes += needed
        key = (rng.first_page, rng.last_page)
        self._touches[key] = self._touches.get(key, 0) + 1
        if new_pages:
            return MigrationAction.migrated(new_pages, self.page_size)
        return MigrationAction.already_resident()

    def _sweep_locked(self) -> Iterator[Tuple[int, int, int]]:
        """Yield (start_page, touch_level, span) runs with level > 0."""
        deltas: Dict[int, int] = {}
        for (lo, hi), count in self._touches.items():
            deltas[lo] = deltas.get(lo, 0) + count
            deltas[hi + 1] = deltas.get(hi + 1, 0) - count
        level = 0
        prev: Optional[int] = None
        for pos in sorted(deltas):
            if level > 0 and prev is not None and pos > prev:
                yield prev, level, pos - prev
            level += deltas[pos]
            prev = pos
