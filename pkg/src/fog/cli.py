"""Operator CLI.

    fog launch station.fog --provider local --trace
    fog status  <id>     fog topics <id>     fog echo <id> /fogros/latency
    fog teardown <id>    fog bench direct --trials 3

Exit codes: 0 success, 2 manifest/validation failure, 3 deployment or
benchmark failure (after rollback), 4 unknown deployment. `--json` makes
every command emit one JSON object per line with the same information.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import uuid
from pathlib import Path
from typing import Optional

from . import bench as bench_mod
from . import provision, state as state_mod
from .manifest import ManifestError, load_catalog, parse_manifest
from .netmon import NetworkStats, RECORD_LEN
from .node import Backoff, Node
from .providers import get_provider
from .registry import Endpoint, RegistryClient, RegistryUnavailable
from .state import TORN_DOWN, UnknownDeployment
from .workloads import WorkloadSpec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DEPLOY = 3
EXIT_UNKNOWN = 4


class Printer:
    def __init__(self, as_json: bool):
        self.as_json = as_json

    def emit(self, text: str, **obj) -> None:
        if self.as_json:
            print(json.dumps(obj, default=str), flush=True)
        else:
            print(text, flush=True)


def cmd_launch(args, out: Printer) -> int:
    path = Path(args.manifest)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        out.emit(f"error: cannot read manifest: {exc}", event="error", error=str(exc))
        return EXIT_VALIDATION
    try:
        m = parse_manifest(text)
        catalog = load_catalog(Path(args.catalog) if args.catalog else None)
        plan = provision.plan_deployment(m, catalog, base_dir=path.parent)
    except ManifestError as exc:
        out.emit(f"error: {exc}", event="error", line=exc.line, code=exc.code, error=str(exc))
        return EXIT_VALIDATION
    except provision.InvalidManifest as exc:
        for d in exc.diagnostics:
            out.emit(
                f"error: line {d.line}: {d.message} [{d.code}]",
                event="diagnostic", line=d.line, code=d.code, message=d.message,
            )
        return EXIT_VALIDATION

    def progress(step: int, group: Optional[str], ok: bool, detail: str) -> None:
        name = group or "edge"
        label = "launch" if group is None else provision.STEP_NAMES[step]
        out.emit(
            f"[{step}/5] {name} {label} {'ok' if ok else 'fail'}"
            + (f" - {detail}" if detail else ""),
            event="step", step=step, group=name, op=label, ok=ok, detail=detail,
        )

    provider = get_provider(args.provider)
    try:
        st = provision.deploy(
            plan,
            provider,
            state_dir=state_mod.state_dir(args.state_dir),
            deployment_id=args.id,
            trace=args.trace,
            progress=progress,
        )
    except provision.AlreadyDeployed as exc:
        out.emit(f"error: {exc}", event="error", error=str(exc))
        return EXIT_DEPLOY
    except provision.StepFailed as exc:
        out.emit(
            f"deployment failed and was rolled back: {exc}",
            event="failed", step=exc.step, group=exc.group, error=exc.cause,
        )
        return EXIT_DEPLOY
    out.emit(
        f"deployment {st.deployment_id} RUNNING (registry {st.edge_registry})",
        event="deployed", id=st.deployment_id, status=st.status, registry=st.edge_registry,
    )
    return EXIT_OK


def _load_live(args, out: Printer):
    sd = state_mod.state_dir(args.state_dir)
    try:
        st = state_mod.load(sd, args.id)
    except UnknownDeployment:
        out.emit(f"error: unknown deployment {args.id}", event="error", error="unknown-deployment")
        return None, sd
    if st.status == TORN_DOWN:
        out.emit(
            f"error: deployment {args.id} is torn down", event="error", error="torn-down"
        )
        return None, sd
    return st, sd


def _edge_proxy_stats(sd: Path, st) -> dict:
    path = sd / st.deployment_id / "logs" / "proxy-edge-stats.json"
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return {}


def cmd_status(args, out: Printer) -> int:
    st, sd = _load_live(args, out)
    if st is None:
        return EXIT_UNKNOWN
    stats = _edge_proxy_stats(sd, st)
    if out.as_json:
        out.emit(
            "",
            event="status",
            id=st.deployment_id,
            status=st.status,
            provider=st.provider,
            trace=st.trace,
            edge_registry=st.edge_registry,
            edge_nodes=st.edge_node_pids,
            groups={
                g.name: {
                    "network": g.network,
                    "instance_type": g.instance_type,
                    "image": g.image,
                    "registry": g.registry_address,
                    "nodes": g.node_pids,
                }
                for g in st.groups.values()
            },
            bridge=stats.get("bridge", []),
            channel_established=stats.get("established"),
            error=st.error,
        )
        return EXIT_OK
    out.emit(f"deployment {st.deployment_id}: {st.status} (provider {st.provider})")
    if st.error:
        out.emit(f"  error: {st.error}")
    out.emit(f"  edge registry {st.edge_registry}")
    for name, pid in st.edge_node_pids.items():
        out.emit(f"  edge node {name} pid {pid}")
    for g in st.groups.values():
        kind = f"image {g.image}" if g.image else "nodes"
        out.emit(f"  group {g.name}: {g.instance_type} network={g.network} {kind}")
        for name, pid in g.node_pids.items():
            out.emit(f"    {name} pid {pid}")
    if stats:
        out.emit(f"  channel established={stats.get('established')} reconnects={stats.get('reconnects')}")
        for topic, direction in stats.get("bridge", []):
            out.emit(f"  bridge {topic} {direction}")
    return EXIT_OK


def _observer_client(address: str) -> RegistryClient:
    return RegistryClient(
        address,
        Endpoint(name=f"fog-cli-{os.getpid()}", node_id=uuid.uuid4().bytes, address="-"),
        ping_interval=60.0,
    )


def cmd_topics(args, out: Printer) -> int:
    st, _sd = _load_live(args, out)
    if st is None:
        return EXIT_UNKNOWN
    sides = [("edge", st.edge_registry)]
    for g in st.groups.values():
        if g.registry_address:
            sides.append(("cloud", g.registry_address))
    for side, address in sides:
        try:
            client = _observer_client(address)
        except RegistryUnavailable as exc:
            out.emit(f"{side} registry {address}: unreachable ({exc})",
                     event="registry", side=side, address=address, error=str(exc))
            continue
        try:
            table = client.snapshot()
        finally:
            client.close()
        if out.as_json:
            out.emit(
                "",
                event="topics", side=side, address=address,
                topics={
                    t: {
                        "publishers": sorted(e.name for e in rec.publishers),
                        "subscribers": sorted(e.name for e in rec.subscribers),
                    }
                    for t, rec in table.items()
                },
            )
        else:
            out.emit(f"{side} registry {address}:")
            for topic in sorted(table):
                rec = table[topic]
                pubs = ",".join(sorted(e.name for e in rec.publishers)) or "-"
                subs = ",".join(sorted(e.name for e in rec.subscribers)) or "-"
                out.emit(f"  {topic}  pubs[{pubs}] subs[{subs}]")
    return EXIT_OK


def cmd_echo(args, out: Printer) -> int:
    st, _sd = _load_live(args, out)
    if st is None:
        return EXIT_UNKNOWN
    node = Node(
        name=f"fog-echo-{os.getpid()}",
        registry=st.edge_registry,
        origin="edge",
        backoff=Backoff(initial=0.1, cap=1.0),
    )
    try:
        sub = node.subscribe(args.topic, capacity=64)
        deadline = time.monotonic() + args.timeout if args.timeout else None
        printed = 0
        while args.count == 0 or printed < args.count:
            remaining = None
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
            env = sub.get(timeout=min(remaining, 0.5) if remaining else 0.5)
            if env is None:
                continue
            printed += 1
            extra = ""
            payload_fields = {}
            if args.topic.startswith("/fogros/") and len(env.payload) == RECORD_LEN:
                stats = NetworkStats.decode(env.payload)
                extra = (
                    f" rtt_ms={stats.rtt_ms:.3f} in_Bps={stats.rate_in}"
                    f" out_Bps={stats.rate_out}{' stale' if stats.stale else ''}"
                )
                payload_fields = {
                    "rtt_ms": stats.rtt_ms, "rate_in": stats.rate_in,
                    "rate_out": stats.rate_out, "stale": stats.stale,
                }
            trace = f" trace={'>'.join(env.trace)}" if env.trace else ""
            out.emit(
                f"seq={env.seq} size={len(env.payload)} origin={env.origin.name.lower()}{extra}{trace}",
                event="message", topic=args.topic, seq=env.seq,
                size=len(env.payload), origin=env.origin.name.lower(),
                trace=list(env.trace), **payload_fields,
            )
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
    return EXIT_OK


def cmd_teardown(args, out: Printer) -> int:
    sd = state_mod.state_dir(args.state_dir)
    try:
        st = state_mod.load(sd, args.id)
    except UnknownDeployment:
        out.emit(f"error: unknown deployment {args.id}", event="error", error="unknown-deployment")
        return EXIT_UNKNOWN
    provider = get_provider(st.provider)
    st, errors = provision.teardown(args.id, provider, state_dir=sd)
    for err in errors:
        out.emit(f"warning: {err}", event="warning", warning=err)
    out.emit(f"deployment {args.id} torn down", event="torn_down", id=args.id, errors=errors)
    return EXIT_OK


def cmd_bench(args, out: Printer) -> int:
    spec = WorkloadSpec(
        frame_size=args.size,
        rate_hz=args.rate,
        kernel_units=args.units,
        unit_cost_ms=args.unit_cost_ms,
    )
    try:
        row, samples = bench_mod.run_benchmark(
            args.scenario,
            spec,
            trials=args.trials,
            state_dir=state_mod.state_dir(args.state_dir),
            edge_baseline_s=args.edge_baseline,
        )
    except bench_mod.DeploymentFailure as exc:
        out.emit(f"benchmark failed: {exc}", event="error", error=str(exc))
        return EXIT_DEPLOY
    if out.as_json:
        out.emit(
            "",
            event="bench",
            scenario=row.scenario,
            edge_only_s=row.edge_only_s,
            cloud_compute_s=row.cloud_compute_s,
            network_s=row.network_s,
            total_s=row.total_s,
            speedup=row.speedup,
            trials=args.trials,
            trace_lengths=samples.trace_lengths,
            end_to_end_s=samples.end_to_end_s,
        )
    else:
        out.emit(bench_mod.render_table([row]))
        out.emit("")
        out.emit(bench_mod.rows_csv([row]))
        out.emit(f"trace lengths: {sorted(set(samples.trace_lengths))}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fog",
        description="Run parts of a pub/sub application on simulated cloud instances.",
    )
    parser.add_argument("--state-dir", default=None, help="state directory (default FOG_STATE_DIR)")
    parser.add_argument("--json", action="store_true", help="one JSON object per output line")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("launch", help="deploy a manifest")
    p.add_argument("manifest")
    p.add_argument("--provider", choices=("local", "mock-remote"), default="local")
    p.add_argument("--trace", action="store_true", help="enable hop tracing")
    p.add_argument("--id", default=None, help="deployment id (default: random)")
    p.add_argument("--catalog", default=None, help="machine catalog file")
    p.set_defaults(fn=cmd_launch)

    p = sub.add_parser("status", help="show deployment state")
    p.add_argument("id")
    p.set_defaults(fn=cmd_status)

    p = sub.add_parser("topics", help="list topics on each registry")
    p.add_argument("id")
    p.set_defaults(fn=cmd_topics)

    p = sub.add_parser("echo", help="subscribe and print envelopes")
    p.add_argument("id")
    p.add_argument("topic")
    p.add_argument("--count", type=int, default=0, help="stop after N messages (0 = forever)")
    p.add_argument("--timeout", type=float, default=0, help="stop after S seconds")
    p.set_defaults(fn=cmd_echo)

    p = sub.add_parser("teardown", help="stop and remove a deployment")
    p.add_argument("id")
    p.set_defaults(fn=cmd_teardown)

    p = sub.add_parser("bench", help="run an offload benchmark scenario")
    p.add_argument("scenario", choices=bench_mod.SCENARIOS)
    p.add_argument("--size", type=int, default=WorkloadSpec.frame_size)
    p.add_argument("--rate", type=float, default=WorkloadSpec.rate_hz)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--units", type=int, default=WorkloadSpec.kernel_units)
    p.add_argument("--unit-cost-ms", type=float, default=WorkloadSpec.unit_cost_ms)
    p.add_argument("--edge-baseline", type=float, default=None,
                   help="edge-only total seconds (skips the baseline run)")
    p.set_defaults(fn=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Printer(args.json)
    return args.fn(args, out)


if __name__ == "__main__":
    sys.exit(main())
