"""Acceptance gate: seven checks, one printed pass/fail line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the lines.
"""

import json
import random
import subprocess
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import pytest

from blasoff import cli
from blasoff.costmodel import builtin_profiles, cost, strategy1_bytes
from blasoff.model import (
    COPY_PER_CALL,
    Decision,
    FIRST_TOUCH_MIGRATE,
    Reason,
    UNIFIED_DEVICE,
    UNIFIED_HOST,
)
from blasoff.policy import OffloadConfig, decide
from blasoff.replay import SynthSpec, gen_synthetic, replay
from blasoff.residency import ResidencyRegistry, pages_for
from blasoff.traceio import Trace, TraceHeader, dump_trace, load_trace

from conftest import reference_call
from driver100 import call_plan
from test_residency import BruteForceRegistry

GOLDEN = Path(__file__).parent / "golden"
OFFLOAD = Decision.offload()
HOST = Decision.host(Reason.BELOW_THRESHOLD)


@contextmanager
def _criterion(num, name):
    try:
        yield
    except BaseException:
        print(f"criterion {num} ({name}): FAIL")
        raise
    print(f"criterion {num} ({name}): PASS")


def _single_call_trace(path):
    trace = Trace(
        TraceHeader(page_size=4096, source="synthetic", machine="acceptance"),
        (reference_call(),),
    )
    dump_trace(trace, path)
    return trace


def test_criterion_1_copy_path_timings(tmp_path):
    with _criterion(1, "copy-path timing reproduction"):
        started = time.monotonic()
        trace_path = tmp_path / "single.jsonl"
        trace = _single_call_trace(trace_path)

        gh200 = builtin_profiles()["gh200"]
        report = replay(trace, COPY_PER_CALL, gh200, OffloadConfig())
        assert report.totals.transfer_s == pytest.approx(4.92e-3, rel=0.01)
        assert report.totals.wall_s == pytest.approx(5.50e-3, rel=0.05)

        h100 = builtin_profiles()["h100_pcie"]
        nominal = replay(trace, COPY_PER_CALL, h100, OffloadConfig())
        assert nominal.totals.transfer_s == pytest.approx(31.79e-3, rel=0.15)

        # calibrate an effective link bandwidth from the measured copy time,
        # then the replayed transfer must land within 2%
        measurements = tmp_path / "m.json"
        measurements.write_text(
            json.dumps(
                {
                    "measurements": [
                        {
                            "kind": "transfer",
                            "path": "link",
                            "bytes": strategy1_bytes(trace.calls[0]),
                            "time_s": 31.79e-3,
                        }
                    ]
                }
            )
        )
        fitted_path = tmp_path / "fitted.json"
        assert (
            cli.main(
                [
                    "calibrate",
                    "--measurements",
                    str(measurements),
                    "--base",
                    "h100_pcie",
                    "--out",
                    str(fitted_path),
                ]
            )
            == 0
        )
        report_path = tmp_path / "calibrated.json"
        assert (
            cli.main(
                [
                    "replay",
                    "--trace",
                    str(trace_path),
                    "--strategy",
                    "1",
                    "--profile",
                    str(fitted_path),
                    "--out",
                    str(report_path),
                ]
            )
            == 0
        )
        calibrated = json.loads(report_path.read_text())
        assert calibrated["totals"]["transfer_s"] == pytest.approx(31.79e-3, rel=0.02)

        assert time.monotonic() - started < 1.0


def test_criterion_2_execution_placement_timings():
    with _criterion(2, "execution-placement timing reproduction"):
        call = reference_call()
        gh200 = builtin_profiles()["gh200"]
        host = cost(call, COPY_PER_CALL, gh200, None, HOST)
        assert host.total() == pytest.approx(19.7e-3, rel=0.02)
        gpu_hostmem = cost(call, UNIFIED_HOST, gh200, None, OFFLOAD)
        assert gpu_hostmem.total() == pytest.approx(19.7e-3, rel=0.02)
        gpu_devmem = cost(call, UNIFIED_DEVICE, gh200, None, OFFLOAD)
        assert gpu_devmem.total() == pytest.approx(0.84e-3, rel=0.02)
        host_on_device = cost(call, UNIFIED_DEVICE, gh200, None, HOST)
        assert host_on_device.total() == pytest.approx(24.9e-3, rel=0.02)


def test_criterion_3_migration_amortization():
    with _criterion(3, "migration amortization on reuse"):
        trace = gen_synthetic(
            SynthSpec(n_matrices=1, reuse_factor=446, dims=(32, 2400, 93536), seed=0)
        )
        gh200 = builtin_profiles()["gh200"]
        cfg = OffloadConfig()
        copy = replay(trace, COPY_PER_CALL, gh200, cfg)
        migrate = replay(trace, FIRST_TOUCH_MIGRATE, gh200, cfg)
        ratio = migrate.totals.bytes_moved / copy.totals.bytes_moved
        assert ratio <= 1 / 400
        assert migrate.totals.migration_s < 0.01 * copy.totals.transfer_s
        assert migrate.reuse.max_touches == 446


def test_criterion_4_threshold_rule_oracle():
    with _criterion(4, "offload-rule agreement with integer oracle"):
        cfg = OffloadConfig()
        cube = 500 ** 3
        rng = random.Random(0xC4)
        checked = 0
        for _ in range(1000):
            scale = rng.choice((64, 300, 500, 501, 700, 2000))
            m, n, k = (max(1, int(rng.gauss(scale, scale / 4))) for _ in range(3))
            verdict = decide("dgemm", m, n, k, cfg).verdict.value
            oracle = "Offload" if m * n * k > cube else "Host"
            assert verdict == oracle, (m, n, k)
            # permutation invariance across all orderings
            for perm in ((m, k, n), (n, m, k), (n, k, m), (k, m, n), (k, n, m)):
                assert decide("dgemm", *perm, cfg).verdict.value == verdict
            # growing any dimension never flips an offload back to host
            if verdict == "Offload":
                assert decide("dgemm", m + 1, n, k, cfg).verdict.value == "Offload"
                assert decide("dgemm", m, n + 1, k, cfg).verdict.value == "Offload"
                assert decide("dgemm", m, n, k + 1, cfg).verdict.value == "Offload"
            checked += 1
        assert checked == 1000
        # exact boundary: the cube itself stays on the host
        assert decide("dgemm", 500, 500, 500, cfg).verdict.value == "Host"
        assert decide("dgemm", 501, 500, 500, cfg).verdict.value == "Offload"


def test_criterion_5_residency_oracle():
    with _criterion(5, "residency bookkeeping vs per-page oracle"):
        page = 4096
        rng = random.Random(0xC5)
        for _ in range(30):
            capacity = rng.choice((64, 1024, 10**4)) * page
            real = ResidencyRegistry(page_size=page, capacity_bytes=capacity)
            brute = BruteForceRegistry(page_size=page, capacity_bytes=capacity)
            for _ in range(40):
                base = rng.randrange(0, 9_000) * page + rng.randint(0, page - 1)
                span = rng.randint(1, 900) * page
                if rng.random() < 0.25:
                    evicted = real.evict_region(base, span)
                    first, last = base // page, (base + span - 1) // page
                    assert evicted == brute.evict(first, last)
                    continue
                action = real.touch_region(base, span)
                kind, detail = brute.touch(base, span)
                assert action.outcome.value == kind
                if kind == "Migrated":
                    assert action.new_pages == detail
                    # byte conservation: bytes moved equal whole pages
                    assert action.bytes == detail * page
                elif kind == "Denied":
                    assert action.needed_bytes == detail
                # repeating a touch never migrates the same pages again
                if rng.random() < 0.2:
                    again = real.touch_region(base, span)
                    kind2, _ = brute.touch(base, span)
                    assert again.outcome.value == kind2
                    assert again.new_pages == 0
            assert real.resident_pages() == brute.resident
            assert real.touch_counts() == brute.touches
            assert real.migrated_bytes_total == brute.migrated_bytes

        # shared-page dedup: overlapping operands in one call migrate once
        real = ResidencyRegistry(page_size=page, capacity_bytes=4 << 30)
        call = reference_call()
        actions, denied = real.touch_call(call.operands)
        assert denied is None
        moved = sum(a.bytes for a in actions)
        union = set()
        for op in call.operands:
            union.update(pages_for(op.base_address, op.region_bytes, page).pages())
        assert moved == len(union) * page

        # dominance: migrating a working set never moves more than copying
        trace = gen_synthetic(SynthSpec(n_matrices=3, reuse_factor=5, dims=(600, 600, 600)))
        gh200 = builtin_profiles()["gh200"]
        copy = replay(trace, COPY_PER_CALL, gh200, OffloadConfig())
        migrate = replay(trace, FIRST_TOUCH_MIGRATE, gh200, OffloadConfig())
        assert migrate.totals.bytes_moved <= copy.totals.bytes_moved


def test_criterion_6_shim_transparency(tmp_path):
    with _criterion(6, "interposer transparency on 100-call driver"):
        started = time.monotonic()
        driver = Path(__file__).parent / "driver100.py"
        plain_out = tmp_path / "plain.bin"
        shim_out = tmp_path / "shim.bin"
        trace_path = tmp_path / "driver.jsonl"
        stats_path = tmp_path / "stats.json"

        plain = subprocess.run(
            [sys.executable, str(driver), str(plain_out)],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert plain.returncode == 0, plain.stderr
        shimmed = subprocess.run(
            [
                sys.executable,
                "-m",
                "blasoff",
                "run",
                "--trace",
                str(trace_path),
                "--stats",
                str(stats_path),
                "--strategy",
                "3",
                str(driver),
                str(shim_out),
            ],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert shimmed.returncode == 0, shimmed.stderr

        assert plain_out.read_bytes() == shim_out.read_bytes()
        assert plain.stdout == shimmed.stdout

        trace = load_trace(trace_path, require_footer=True)
        assert len(trace.calls) == 100

        oracle = sum(1 for _, _, m, n, k in call_plan() if m * n * k > 500 ** 3)
        stats = json.loads(stats_path.read_text())
        assert stats["totals"]["offloaded"] == oracle
        assert stats["totals"]["seen"] == 100
        assert stats["totals"]["host"] == 100 - oracle

        assert time.monotonic() - started < 10.0


def test_criterion_7_deterministic_outputs(tmp_path):
    with _criterion(7, "byte-deterministic outputs and golden files"):
        gen_args = ["gen", "--matrices", "2", "--reuse", "3", "--dims",
                    "600,600,600", "--seed", "7"]
        first_trace = tmp_path / "first.jsonl"
        second_trace = tmp_path / "second.jsonl"
        assert cli.main(gen_args + ["--out", str(first_trace)]) == 0
        assert cli.main(gen_args + ["--out", str(second_trace)]) == 0
        assert first_trace.read_bytes() == second_trace.read_bytes()
        assert first_trace.read_bytes() == (GOLDEN / "golden_trace.jsonl").read_bytes()

        replays = []
        compares = []
        for label in ("a", "b"):
            replay_out = tmp_path / f"replay_{label}.json"
            compare_out = tmp_path / f"compare_{label}.json"
            assert (
                cli.main(
                    ["replay", "--trace", str(first_trace), "--strategy", "3",
                     "--out", str(replay_out)]
                )
                == 0
            )
            assert (
                cli.main(
                    ["compare", "--trace", str(first_trace), "--out", str(compare_out)]
                )
                == 0
            )
            replays.append(replay_out.read_bytes())
            compares.append(compare_out.read_bytes())
        assert replays[0] == replays[1]
        assert compares[0] == compares[1]
        assert replays[0] == (GOLDEN / "golden_replay.json").read_bytes()
        assert compares[0] == (GOLDEN / "golden_compare.json").read_bytes()
