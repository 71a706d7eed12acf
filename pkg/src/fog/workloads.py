"""Built-in benchmark nodes: a sensor-like source, a parallel compute node,
and a sink.

The compute kernel is a deterministic integer mixing loop split into work
units. Each unit costs a fixed wall-clock quantum, so compute time scales
with FOG_WORKERS on any host regardless of core count, while the numeric
digest is a plain sum over units and therefore identical for every
partitioning. Payload sizes default to 48 KiB frames, the shape of a
640x480 camera feed.

Wire formats (big-endian):

    request  payload: req_id u64 | publish_ts_ns u64 | filler to size
    response payload: req_id u64 | request_ts_ns u64 | compute_ns u64 | digest u64
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import threading
import time
from dataclasses import dataclass

from .node import Node

DEFAULT_FRAME_SIZE = 49_152  # 48 KiB
DEFAULT_RATE_HZ = 10.0
DEFAULT_KERNEL_UNITS = 240
DEFAULT_UNIT_COST_MS = 10.0
KERNEL_SEED = 0x5EED0F06

REQUEST_HEADER = struct.Struct(">QQ")
RESPONSE_FORMAT = struct.Struct(">QQQQ")

_MASK64 = 2**64 - 1


@dataclass(frozen=True)
class WorkloadSpec:
    frame_size: int = DEFAULT_FRAME_SIZE
    rate_hz: float = DEFAULT_RATE_HZ
    kernel_units: int = DEFAULT_KERNEL_UNITS
    unit_cost_ms: float = DEFAULT_UNIT_COST_MS


def mix64(x: int) -> int:
    """splitmix64 finalizer; the arithmetic core of a kernel unit."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def kernel_unit(index: int, seed: int = KERNEL_SEED, rounds: int = 64) -> int:
    value = mix64(seed ^ index)
    for i in range(rounds):
        value = mix64(value + i)
    return value


def run_kernel(
    units: int,
    workers: int,
    unit_cost_s: float,
    seed: int = KERNEL_SEED,
) -> tuple[int, float]:
    """Process ``units`` work units across ``workers``; returns (digest, secs).

    The digest is the u64 sum over all units, independent of how units are
    divided among workers; each unit is paced by ``unit_cost_s``.
    """
    if units < 1 or workers < 1:
        raise ValueError("units and workers must be >= 1")
    partials = [0] * workers
    start = time.monotonic()

    def work(w: int) -> None:
        acc = 0
        for index in range(w, units, workers):
            acc = (acc + kernel_unit(index, seed)) & _MASK64
            if unit_cost_s > 0:
                time.sleep(unit_cost_s)
        partials[w] = acc

    threads = [threading.Thread(target=work, args=(w,)) for w in range(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    digest = 0
    for p in partials:
        digest = (digest + p) & _MASK64
    return digest, time.monotonic() - start


def make_request(req_id: int, size: int, ts_ns: "int | None" = None) -> bytes:
    header = REQUEST_HEADER.pack(req_id, time.time_ns() if ts_ns is None else ts_ns)
    filler = max(0, size - len(header))
    return header + bytes(filler)


def parse_request(payload: bytes) -> tuple[int, int]:
    if len(payload) < REQUEST_HEADER.size:
        raise ValueError("request payload too short")
    return REQUEST_HEADER.unpack_from(payload)


def make_response(req_id: int, request_ts_ns: int, compute_ns: int, digest: int) -> bytes:
    return RESPONSE_FORMAT.pack(req_id, request_ts_ns, compute_ns, digest)


def parse_response(payload: bytes) -> tuple[int, int, int, int]:
    if len(payload) != RESPONSE_FORMAT.size:
        raise ValueError(f"response payload must be {RESPONSE_FORMAT.size} bytes")
    return RESPONSE_FORMAT.unpack(payload)


def run_source(args: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="builtin source")
    parser.add_argument("--topic", default="/sensor")
    parser.add_argument("--rate", type=float, default=DEFAULT_RATE_HZ)
    parser.add_argument("--size", type=int, default=DEFAULT_FRAME_SIZE)
    parser.add_argument("--count", type=int, default=0, help="stop after N frames (0 = forever)")
    opts = parser.parse_args(args)
    node = Node.from_env()
    pub = node.advertise(opts.topic)
    period = 1.0 / opts.rate if opts.rate > 0 else 0.0
    sent = 0
    next_at = time.monotonic()
    try:
        while opts.count == 0 or sent < opts.count:
            pub.publish(make_request(sent + 1, opts.size))
            sent += 1
            next_at += period
            delay = next_at - time.monotonic()
            if delay > 0:
                time.sleep(delay)
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
    return 0


def run_compute(args: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="builtin compute")
    parser.add_argument("--in", dest="topic_in", default="/sensor")
    parser.add_argument("--out", dest="topic_out", default="/result")
    parser.add_argument("--units", type=int, default=DEFAULT_KERNEL_UNITS)
    parser.add_argument("--unit-cost-ms", type=float, default=DEFAULT_UNIT_COST_MS)
    opts = parser.parse_args(args)
    workers = max(1, int(os.environ.get("FOG_WORKERS", "1")))
    node = Node.from_env()
    # Capacity 1: one request in flight at a time, newest request wins.
    sub = node.subscribe(opts.topic_in, capacity=1)
    pub = node.advertise(opts.topic_out)
    try:
        for env in sub:
            try:
                req_id, req_ts = parse_request(env.payload)
            except ValueError:
                continue
            digest, duration = run_kernel(opts.units, workers, opts.unit_cost_ms / 1000)
            pub.publish(make_response(req_id, req_ts, int(duration * 1e9), digest))
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
    return 0


def run_sink(args: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="builtin sink")
    parser.add_argument("--topic", default="/result")
    opts = parser.parse_args(args)
    node = Node.from_env()
    sub = node.subscribe(opts.topic, capacity=64)
    received = 0
    try:
        for env in sub:
            received += 1
            now = time.time_ns()
            try:
                req_id, req_ts, compute_ns, digest = parse_response(env.payload)
                print(
                    f"result req={req_id} e2e_ms={(now - req_ts) / 1e6:.2f} "
                    f"compute_ms={compute_ns / 1e6:.2f} digest={digest:016x} "
                    f"hops={len(env.trace)}",
                    flush=True,
                )
            except ValueError:
                print(f"message seq={env.seq} bytes={len(env.payload)}", flush=True)
    except KeyboardInterrupt:
        pass
    finally:
        node.close()
    return 0


BUILTINS = {
    "source": run_source,
    "compute": run_compute,
    "sink": run_sink,
}


def run_builtin(entry: str, args: list[str]) -> int:
    fn = BUILTINS.get(entry)
    if fn is None:
        print(f"unknown builtin workload {entry!r}; have {sorted(BUILTINS)}", file=sys.stderr)
        return 2
    return fn(args)
