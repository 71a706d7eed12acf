"""Offload benchmarks: edge-only vs cloud timing rows and speedup report.

A benchmark deploys one compute node on an instance, then acts as source
and sink itself: publish a request frame, wait for the response, repeat.
Timing decomposes into compute and network: the compute node reports its own
kernel duration, network time is end-to-end minus compute (all clocks are
one host here, so no synchronization games), and

    total   = compute + network
    speedup = edge_only / total

The edge-only baseline runs the identical task on a single-worker
instance; direct/proxy run it on an eight-worker instance under the
respective networking mode.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import provision, state as state_mod
from .manifest import DEFAULT_CATALOG, parse_manifest
from .node import Backoff, Node
from .providers import LocalProvider, Provider
from .workloads import WorkloadSpec, make_request, parse_response

log = logging.getLogger(__name__)

SCENARIOS = ("edge_only", "direct", "proxy")
EDGE_INSTANCE_TYPE = "t3.micro"      # 1 worker: the weak edge computer
CLOUD_INSTANCE_TYPE = "c5.24xlarge"  # 8 workers


class NegativeInput(ValueError):
    pass


class DeploymentFailure(Exception):
    pass


@dataclass(frozen=True)
class TimingRow:
    scenario: str
    edge_only_s: float
    cloud_compute_s: float
    network_s: float
    total_s: float
    speedup: float


def make_timing_row(
    scenario: str, edge_only_s: float, cloud_compute_s: float, network_s: float
) -> TimingRow:
    """Row arithmetic: total = compute + network, speedup = edge / total."""
    for label, value in (
        ("edge_only_s", edge_only_s),
        ("cloud_compute_s", cloud_compute_s),
        ("network_s", network_s),
    ):
        if value < 0:
            raise NegativeInput(f"{label} must be nonnegative, got {value}")
    total = cloud_compute_s + network_s
    speedup = edge_only_s / total if total > 0 else float("inf")
    return TimingRow(
        scenario=scenario,
        edge_only_s=edge_only_s,
        cloud_compute_s=cloud_compute_s,
        network_s=network_s,
        total_s=total,
        speedup=speedup,
    )


_COLUMNS = ("Scenario", "Edge Only (s)", "Compute (s)", "Network (s)", "Total (s)", "Speedup")


def render_table(rows: list[TimingRow]) -> str:
    cells = [_COLUMNS] + [
        (
            r.scenario,
            f"{r.edge_only_s:.3f}",
            f"{r.cloud_compute_s:.3f}",
            f"{r.network_s:.3f}",
            f"{r.total_s:.3f}",
            f"{r.speedup:.2f}x",
        )
        for r in rows
    ]
    widths = [max(len(row[i]) for row in cells) for i in range(len(_COLUMNS))]
    lines = []
    for i, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def rows_csv(rows: list[TimingRow]) -> str:
    out = ["scenario,edge_only_s,cloud_compute_s,network_s,total_s,speedup"]
    for r in rows:
        out.append(
            f"{r.scenario},{r.edge_only_s:.6f},{r.cloud_compute_s:.6f},"
            f"{r.network_s:.6f},{r.total_s:.6f},{r.speedup:.4f}"
        )
    return "\n".join(out)


@dataclass
class BenchSamples:
    end_to_end_s: list[float] = field(default_factory=list)
    compute_s: list[float] = field(default_factory=list)
    network_s: list[float] = field(default_factory=list)
    trace_lengths: list[int] = field(default_factory=list)
    digests: list[int] = field(default_factory=list)


def _bench_manifest(scenario: str, spec: WorkloadSpec) -> str:
    instance = EDGE_INSTANCE_TYPE if scenario == "edge_only" else CLOUD_INSTANCE_TYPE
    network = "proxy" if scenario == "proxy" else "direct"
    return f"""
[node compute]
package = builtin
exec = compute
args = --in, /sensor, --out, /result, --units, {spec.kernel_units}, --unit-cost-ms, {spec.unit_cost_ms}
placement = cloud:crunch

[cloud crunch]
instance_type = {instance}
network = {network}
"""


def run_benchmark(
    scenario: str,
    spec: Optional[WorkloadSpec] = None,
    trials: int = 3,
    state_dir: "str | Path | None" = None,
    provider: Optional[Provider] = None,
    edge_baseline_s: Optional[float] = None,
    request_timeout: float = 120.0,
) -> tuple[TimingRow, BenchSamples]:
    """Deploy the scenario, drive `trials` request/response cycles, report."""
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    spec = spec or WorkloadSpec()
    provider = provider or LocalProvider()
    sd = state_mod.state_dir(state_dir)

    if scenario != "edge_only" and edge_baseline_s is None:
        baseline_row, _ = run_benchmark(
            "edge_only", spec, trials=trials, state_dir=sd,
            provider=provider, request_timeout=request_timeout,
        )
        edge_baseline_s = baseline_row.total_s

    m = parse_manifest(_bench_manifest(scenario, spec))
    plan = provision.plan_deployment(m, DEFAULT_CATALOG)
    try:
        st = provision.deploy(plan, provider, state_dir=sd, trace=True)
    except provision.StepFailed as exc:
        raise DeploymentFailure(str(exc)) from exc

    samples = BenchSamples()
    driver = None
    try:
        driver = Node(
            "bench-driver",
            st.edge_registry,
            origin="edge",
            trace=True,
            backoff=Backoff(initial=0.1, cap=1.0),
        )
        pub = driver.advertise("/sensor")
        sub = driver.subscribe("/result", capacity=16)

        def one_request(req_id: int, timeout: float) -> Optional[tuple[float, float, int, int]]:
            sent_ns = time.time_ns()
            pub.publish(make_request(req_id, spec.frame_size, ts_ns=sent_ns))
            deadline = time.monotonic() + timeout
            while time.monotonic() < deadline:
                env = sub.get(timeout=0.5)
                if env is None:
                    continue
                try:
                    rid, req_ts, compute_ns, digest = parse_response(env.payload)
                except ValueError:
                    continue
                if rid != req_id:
                    continue
                e2e = (time.time_ns() - req_ts) / 1e9
                return e2e, compute_ns / 1e9, digest, len(env.trace)
            return None

        # Warm up until the request path is actually wired through.
        warm_deadline = time.monotonic() + 30.0
        warm_id = 1_000_000
        while one_request(warm_id, timeout=max(5.0, spec.kernel_units * spec.unit_cost_ms / 1000 + 5)) is None:
            warm_id += 1
            if time.monotonic() > warm_deadline:
                raise DeploymentFailure(f"benchmark pipeline never produced a response ({scenario})")

        for req_id in range(1, trials + 1):
            result = one_request(req_id, timeout=request_timeout)
            if result is None:
                raise DeploymentFailure(f"request {req_id} timed out ({scenario})")
            e2e, compute_s, digest, hops = result
            samples.end_to_end_s.append(e2e)
            samples.compute_s.append(compute_s)
            samples.network_s.append(max(0.0, e2e - compute_s))
            samples.digests.append(digest)
            samples.trace_lengths.append(hops)
    finally:
        if driver is not None:
            driver.close()
        try:
            provision.teardown(st.deployment_id, provider, state_dir=sd)
        except Exception:
            log.exception("benchmark teardown failed")

    compute_mean = statistics.fmean(samples.compute_s)
    network_mean = statistics.fmean(samples.network_s)
    total_mean = compute_mean + network_mean
    row = make_timing_row(
        scenario,
        edge_baseline_s if edge_baseline_s is not None else total_mean,
        compute_mean,
        network_mean,
    )
    return row, samples
