"""Benchmarks: timing-row arithmetic, kernel determinism, end-to-end run."""

import subprocess
import sys
import time

import pytest

from fog.bench import (
    NegativeInput,
    make_timing_row,
    render_table,
    rows_csv,
    run_benchmark,
)
from fog.node import Backoff, Node
from fog.registry import RegistryServer
from fog.workloads import (
    WorkloadSpec,
    kernel_unit,
    make_request,
    make_response,
    parse_request,
    parse_response,
    run_kernel,
)

# Reference rows: (scenario, edge_only, compute, network, printed total);
# the VPC columns add exactly, the proxy columns carry final-digit rounding.
MOTION_PLANNING_VPC_ROWS = [
    ("Apartment", 157.6, 4.2, 0.4, 4.6),
    ("Cubicles", 35.8, 1.4, 0.3, 1.7),
    ("Home", 161.8, 6.2, 0.3, 6.5),
    ("TwistyCool", 167.9, 5.1, 0.4, 5.5),
]
GRASP_ROWS = [
    ("Compressed-VPC", 7.3, 0.6, 0.6, 1.2),
    ("Compressed-Proxy", 7.3, 0.6, 0.8, 1.4),
    ("Uncompressed-VPC", 7.5, 0.6, 0.7, 1.3),
    ("Uncompressed-Proxy", 7.5, 0.6, 0.9, 1.5),
]


def test_timing_rows_reproduce_reference_tables():
    for scenario, edge, compute, network, total in MOTION_PLANNING_VPC_ROWS + GRASP_ROWS:
        row = make_timing_row(scenario, edge, compute, network)
        assert row.total_s == pytest.approx(total, abs=1e-9)
        assert row.speedup == pytest.approx(edge / total, rel=1e-12)


def test_headline_speedups():
    apartment = make_timing_row("Apartment", 157.6, 4.2, 0.4)
    assert apartment.speedup == pytest.approx(34.26, abs=0.005)
    grasp = make_timing_row("Compressed-VPC", 7.3, 0.6, 0.6)
    assert grasp.speedup == pytest.approx(6.08, abs=0.005)


def test_equal_edge_and_total_gives_unit_speedup():
    row = make_timing_row("flat", 2.0, 1.5, 0.5)
    assert row.speedup == pytest.approx(1.0)


def test_negative_inputs_rejected():
    with pytest.raises(NegativeInput):
        make_timing_row("bad", -1.0, 0.0, 0.0)
    with pytest.raises(NegativeInput):
        make_timing_row("bad", 1.0, -0.1, 0.0)
    with pytest.raises(NegativeInput):
        make_timing_row("bad", 1.0, 0.0, -0.1)


def test_table_rendering_shape():
    rows = [make_timing_row("Apartment", 157.6, 4.2, 0.4)]
    table = render_table(rows)
    lines = table.splitlines()
    assert lines[0].split()[0] == "Scenario"
    assert "34.26x" in table
    csv = rows_csv(rows)
    assert csv.splitlines()[0] == "scenario,edge_only_s,cloud_compute_s,network_s,total_s,speedup"
    assert csv.splitlines()[1].startswith("Apartment,157.6")


def test_kernel_digest_independent_of_worker_count():
    digests = {run_kernel(64, workers, unit_cost_s=0.0)[0] for workers in (1, 2, 3, 8)}
    assert len(digests) == 1


def test_kernel_unit_is_deterministic():
    assert kernel_unit(7) == kernel_unit(7)
    assert kernel_unit(7) != kernel_unit(8)
    assert kernel_unit(7, seed=1) != kernel_unit(7, seed=2)


def test_eight_workers_beat_one_on_same_problem():
    digest1, t1 = run_kernel(40, 1, unit_cost_s=0.02)
    digest8, t8 = run_kernel(40, 8, unit_cost_s=0.02)
    assert digest1 == digest8
    assert t8 < t1
    assert t1 >= 0.8  # 40 units x 20 ms on one worker


def test_request_response_payload_round_trip():
    req = make_request(42, 49_152, ts_ns=123)
    assert len(req) == 49_152
    assert parse_request(req) == (42, 123)
    resp = make_response(42, 123, 987_654_321, 0xDEADBEEF)
    assert parse_response(resp) == (42, 123, 987_654_321, 0xDEADBEEF)


@pytest.mark.parametrize("frame_size", [0, 4096])
def test_run_benchmark_direct_small(tmp_path, fast_env, frame_size):
    spec = WorkloadSpec(frame_size=frame_size, kernel_units=24, unit_cost_ms=5.0)
    row, samples = run_benchmark(
        "direct", spec, trials=2, state_dir=tmp_path, edge_baseline_s=1.0
    )
    assert row.scenario == "direct"
    assert row.total_s == pytest.approx(row.cloud_compute_s + row.network_s, abs=1e-9)
    assert row.edge_only_s == 1.0
    assert len(set(samples.digests)) == 1
    assert samples.trace_lengths == [1, 1]
    # network time stays nonnegative and finite down to zero-size requests
    assert all(0 <= t < float("inf") for t in samples.network_s)


def test_proxy_vs_direct_paired_measurement(tmp_path, fast_env):
    """Hop counts are asserted exactly; the timing delta is reported only."""
    spec = WorkloadSpec(frame_size=2048, kernel_units=8, unit_cost_ms=2.0)
    direct_row, direct_samples = run_benchmark(
        "direct", spec, trials=3, state_dir=tmp_path, edge_baseline_s=1.0
    )
    proxy_row, proxy_samples = run_benchmark(
        "proxy", spec, trials=3, state_dir=tmp_path, edge_baseline_s=1.0
    )
    assert set(direct_samples.trace_lengths) == {1}
    assert set(proxy_samples.trace_lengths) == {3}
    assert direct_samples.digests == proxy_samples.digests
    delta_ms = (proxy_row.network_s - direct_row.network_s) * 1000
    print(
        f"\nnetwork time: direct {direct_row.network_s * 1000:.2f}ms, "
        f"proxy {proxy_row.network_s * 1000:.2f}ms (delta {delta_ms:+.2f}ms)"
    )


def test_run_benchmark_rejects_unknown_scenario(tmp_path):
    with pytest.raises(ValueError):
        run_benchmark("warp", state_dir=tmp_path)


def test_source_publishes_at_configured_rate(tmp_path, fast_env):
    registry = RegistryServer(liveness_timeout=2.0)
    consumer = Node("ratewatch", registry.address, backoff=Backoff(initial=0.05, cap=0.3))
    sub = consumer.subscribe("/campera", capacity=256)
    env = {
        "FOG_MASTER": registry.address,
        "FOG_NODE_NAME": "cam",
        "FOG_ORIGIN": "edge",
        "PATH": "/usr/bin:/bin",
    }
    proc = subprocess.Popen(
        [sys.executable, "-m", "fog.runners", "node", "--deployment", "ratetest",
         "--name", "cam", "--package", "builtin", "--exec", "source", "--",
         "--topic", "/campera", "--rate", "10", "--size", "49152", "--count", "35"],
        env=env,
    )
    try:
        received = []
        deadline = time.monotonic() + 20
        while len(received) < 35 and time.monotonic() < deadline:
            msg = sub.get(timeout=0.5)
            if msg is not None:
                received.append((time.monotonic(), msg))
        assert len(received) >= 30
        # steady-state rate over the received window: 10 +/- 1 per second
        times = [t for t, _ in received]
        rate = (len(times) - 1) / (times[-1] - times[0])
        assert 9.0 <= rate <= 11.0
        assert all(len(m.payload) == 49_152 for _, m in received)
    finally:
        proc.terminate()
        proc.wait(timeout=10)
        consumer.close()
        registry.close()


def test_pipeline_rate_through_compute(tmp_path, fast_env):
    """48 KiB frames at 10 Hz reach the result consumer at 10 +/- 1 per second."""
    registry = RegistryServer(liveness_timeout=2.0)
    consumer = Node("sinkish", registry.address, backoff=Backoff(initial=0.05, cap=0.3))
    sub = consumer.subscribe("/result", capacity=256)
    env = {
        "FOG_MASTER": registry.address,
        "FOG_ORIGIN": "edge",
        "PATH": "/usr/bin:/bin",
    }
    compute = subprocess.Popen(
        [sys.executable, "-m", "fog.runners", "node", "--deployment", "pipe1",
         "--name", "crunch", "--package", "builtin", "--exec", "compute", "--",
         "--in", "/sensor", "--out", "/result", "--units", "1", "--unit-cost-ms", "0"],
        env={**env, "FOG_NODE_NAME": "crunch", "FOG_WORKERS": "1"},
    )
    source = subprocess.Popen(
        [sys.executable, "-m", "fog.runners", "node", "--deployment", "pipe1",
         "--name", "cam", "--package", "builtin", "--exec", "source", "--",
         "--topic", "/sensor", "--rate", "10", "--size", "49152", "--count", "45"],
        env={**env, "FOG_NODE_NAME": "cam"},
    )
    try:
        received = []
        deadline = time.monotonic() + 25
        while len(received) < 40 and time.monotonic() < deadline:
            msg = sub.get(timeout=0.5)
            if msg is not None:
                received.append(time.monotonic())
        assert len(received) >= 30, f"only {len(received)} results"
        rate = (len(received) - 1) / (received[-1] - received[0])
        assert 9.0 <= rate <= 11.0, f"rate {rate:.2f}/s"
    finally:
        source.terminate()
        compute.terminate()
        source.wait(timeout=10)
        compute.wait(timeout=10)
        consumer.close()
        registry.close()
