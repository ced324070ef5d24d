import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blasoff.model import MatrixOperand
from blasoff.residency import (
    EmptyRegionError,
    MigrationOutcome,
    PageRange,
    ResidencyRegistry,
    pages_for,
)

from conftest import REF_TOUCH_BYTES, reference_call

PAGE = 4096


class BruteForceRegistry:
    """Per-page set + counter oracle with the same admission rules."""

    def __init__(self, page_size=PAGE, capacity_bytes=1 << 40):
        self.page_size = page_size
        self.capacity = capacity_bytes
        self.resident = set()
        self.touches = {}
        self.migrated_bytes = 0

    def _pages(self, base, length):
        return range(base // self.page_size, (base + length - 1) // self.page_size + 1)

    def touch(self, base, length):
        pages = list(self._pages(base, length))
        new = [p for p in pages if p not in self.resident]
        if new:
            needed = len(new) * self.page_size
            if len(self.resident) * self.page_size + needed > self.capacity:
                return ("Denied", needed)
            self.resident.update(new)
            self.migrated_bytes += needed
        for p in pages:
            self.touches[p] = self.touches.get(p, 0) + 1
        if new:
            return ("Migrated", len(new))
        return ("AlreadyResident", 0)

    def evict(self, first, last):
        span = set(range(first, last + 1))
        removed = len(self.resident & span)
        self.resident -= span
        return removed


def test_pages_for_reference_operands():
    call = reference_call()
    a = pages_for(call.a.base_address, call.a.region_bytes, PAGE)
    b = pages_for(call.b.base_address, call.b.region_bytes, PAGE)
    c = pages_for(call.c.base_address, call.c.region_bytes, PAGE)
    assert a.count == 5846
    assert b.count == 438450
    assert c.count == 150


def test_pages_for_edges():
    # one byte still occupies a page
    assert pages_for(0, 1, PAGE) == PageRange(0, 0)
    # a region ending exactly on a page boundary stays in that page
    assert pages_for(0, PAGE, PAGE) == PageRange(0, 0)
    assert pages_for(0, PAGE + 1, PAGE) == PageRange(0, 1)
    # unaligned base straddles
    assert pages_for(PAGE - 1, 2, PAGE) == PageRange(0, 1)
    with pytest.raises(EmptyRegionError):
        pages_for(0, 0, PAGE)
    with pytest.raises(ValueError):
        pages_for(0, 1, 1000)


def test_page_range_validation():
    with pytest.raises(ValueError):
        PageRange(5, 4)
    assert PageRange(3, 7).count == 5


def test_first_touch_then_already_resident():
    reg = ResidencyRegistry()
    call = reference_call()
    action = reg.touch(call.a)
    assert action.outcome is MigrationOutcome.MIGRATED
    assert action.new_pages == 5846
    assert action.bytes == call.a.region_bytes  # page-exact operand
    again = reg.touch(call.a)
    assert again.outcome is MigrationOutcome.ALREADY_RESIDENT
    assert again.new_pages == 0
    assert reg.migrated_bytes_total == call.a.region_bytes


def test_shared_page_dedup():
    reg = ResidencyRegistry()
    reg.touch_region(0, 3 * PAGE)  # pages 0,1,2
    action = reg.touch_region(2 * PAGE, 3 * PAGE)  # pages 2,3,4; 2 already there
    assert action.outcome is MigrationOutcome.MIGRATED
    assert action.new_pages == 2
    assert reg.resident_page_count == 5
    assert reg.migrated_bytes_total == 5 * PAGE


def test_capacity_denied_leaves_registry_unchanged():
    reg = ResidencyRegistry(capacity_bytes=PAGE)
    action = reg.touch_region(0, 2 * PAGE)  # needs 2 pages, capacity 1
    assert action.outcome is MigrationOutcome.DENIED
    assert action.needed_bytes == 2 * PAGE
    assert reg.resident_page_count == 0
    assert reg.migrated_bytes_total == 0
    assert reg.reuse_stats().migrated_bytes == 0
    # denial does not bump touch counts
    assert reg.touch_counts() == {}


def test_capacity_boundary_admits_exact_fit():
    reg = ResidencyRegistry(capacity_bytes=2 * PAGE)
    assert reg.touch_region(0, 2 * PAGE).outcome is MigrationOutcome.MIGRATED
    assert reg.touch_region(5 * PAGE, PAGE).outcome is MigrationOutcome.DENIED


def test_evict_returns_count_and_keeps_touches():
    reg = ResidencyRegistry()
    reg.touch_region(0, 4 * PAGE)
    reg.touch_region(0, 4 * PAGE)
    released = reg.evict(PageRange(1, 2))
    assert released == 2
    assert reg.resident_page_count == 2
    # touch counts survive eviction
    assert reg.touch_counts() == {0: 2, 1: 2, 2: 2, 3: 2}
    # re-touch migrates the evicted pages again
    action = reg.touch_region(0, 4 * PAGE)
    assert action.outcome is MigrationOutcome.MIGRATED
    assert action.new_pages == 2
    assert reg.migrated_bytes_total == 6 * PAGE


def test_evict_outside_resident_is_noop():
    reg = ResidencyRegistry()
    reg.touch_region(0, PAGE)
    assert reg.evict(PageRange(100, 200)) == 0
    assert reg.resident_page_count == 1


def test_touch_call_atomic_admission():
    call = reference_call()
    # room for A and C but not B: nothing must migrate
    reg = ResidencyRegistry(capacity_bytes=10_000 * PAGE)
    actions, needed = reg.touch_call(call.operands)
    assert actions == []
    assert needed == REF_TOUCH_BYTES
    assert reg.resident_page_count == 0
    assert reg.reuse_stats().migrated_bytes == 0

    big = ResidencyRegistry(capacity_bytes=1 << 40)
    actions, needed = big.touch_call(call.operands)
    assert needed is None
    assert [a.outcome for a in actions] == [MigrationOutcome.MIGRATED] * 3
    assert sum(a.bytes for a in actions) == REF_TOUCH_BYTES


def test_touch_call_counts_shared_pages_once():
    reg = ResidencyRegistry(capacity_bytes=3 * PAGE)
    two_pages = 2 * PAGE // 8  # rows of float64 filling exactly two pages
    one_page = PAGE // 8
    ops = (
        MatrixOperand(0, two_pages, 1, two_pages, 8, "A"),  # pages 0,1
        MatrixOperand(PAGE, two_pages, 1, two_pages, 8, "B"),  # pages 1,2 (shares 1)
        MatrixOperand(2 * PAGE, one_page, 1, one_page, 8, "C"),  # page 2 (shared)
    )
    actions, needed = reg.touch_call(ops)
    assert needed is None  # union is 3 pages, fits exactly
    assert sum(a.new_pages for a in actions) == 3
    assert [a.outcome for a in actions] == [
        MigrationOutcome.MIGRATED,
        MigrationOutcome.MIGRATED,
        MigrationOutcome.ALREADY_RESIDENT,
    ]
    assert reg.migrated_bytes_total == 3 * PAGE


def test_reuse_stats_reference_trace_shape():
    call = reference_call()
    reg = ResidencyRegistry()
    for _ in range(446):
        reg.touch_call(call.operands)
    stats = reg.reuse_stats()
    assert stats.migrated_bytes == REF_TOUCH_BYTES
    assert stats.max_touches == 446
    assert stats.mean_touches_per_page == pytest.approx(446.0)


def test_reuse_stats_empty():
    stats = ResidencyRegistry().reuse_stats()
    assert stats.migrated_bytes == 0
    assert stats.mean_touches_per_page == 0.0
    assert stats.max_touches == 0


def test_concurrent_touch_no_double_count():
    reg = ResidencyRegistry()
    errors = []

    def worker():
        try:
            for _ in range(200):
                reg.touch_region(0, 10 * PAGE)
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert reg.migrated_bytes_total == 10 * PAGE
    assert reg.resident_page_count == 10
    assert reg.reuse_stats().max_touches == 8 * 200


# -- randomized equivalence with the brute-force oracle ----------------------

_region = st.tuples(
    st.integers(min_value=0, max_value=9_000 * PAGE),
    st.integers(min_value=1, max_value=60 * PAGE),
)


@settings(max_examples=120, deadline=None)
@given(
    ops=st.lists(
        st.one_of(
            st.tuples(st.just("touch"), _region),
            st.tuples(
                st.just("evict"),
                st.tuples(
                    st.integers(min_value=0, max_value=9_500),
                    st.integers(min_value=0, max_value=80),
                ),
            ),
        ),
        max_size=40,
    ),
    capacity_pages=st.one_of(st.just(1 << 20), st.integers(min_value=1, max_value=300)),
)
def test_registry_matches_brute_force_oracle(ops, capacity_pages):
    reg = ResidencyRegistry(capacity_bytes=capacity_pages * PAGE)
    oracle = BruteForceRegistry(capacity_bytes=capacity_pages * PAGE)
    for op, payload in ops:
        if op == "touch":
            base, length = payload
            action = reg.touch_region(base, length)
            kind, detail = oracle.touch(base, length)
            assert action.outcome.value == kind
            if kind == "Migrated":
                assert action.new_pages == detail
            elif kind == "Denied":
                assert action.needed_bytes == detail
        else:
            first, span = payload
            assert reg.evict(PageRange(first, first + span)) == oracle.evict(
                first, first + span
            )
    assert reg.resident_pages() == oracle.resident
    assert reg.touch_counts() == oracle.touches
    assert reg.migrated_bytes_total == oracle.migrated_bytes
    if oracle.touches:
        stats = reg.reuse_stats()
        assert stats.max_touches == max(oracle.touches.values())
        assert stats.mean_touches_per_page == pytest.approx(
            sum(oracle.touches.values()) / len(oracle.touches)
        )
