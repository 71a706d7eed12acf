"""Network condition monitoring on /fogros/latency and /fogros/throughput.

A monitor runs beside each side's registry. Every probe interval it checks
the registry for subscribers on the monitor topics; with none present it
sends no probe frames and publishes nothing, so monitoring costs zero
traffic until someone actually subscribes.

Stats payloads are a fixed 32-byte record of four u64 big-endian fields:
rtt in microseconds, inbound rate, outbound rate (bytes/s over a 1 s
window), and the sample timestamp in nanoseconds whose low bit carries the
staleness flag (set when the probe path was down and rtt is the last
known estimate).
"""

from __future__ import annotations

import logging
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .node import Node
from .registry import RegistryUnavailable

log = logging.getLogger(__name__)

LATENCY_TOPIC = "/fogros/latency"
THROUGHPUT_TOPIC = "/fogros/throughput"
RECORD_LEN = 32
DEFAULT_PROBE_INTERVAL = 1.0
EWMA_ALPHA = 0.2


@dataclass(frozen=True)
class NetworkStats:
    rtt_us: int
    rate_in: int
    rate_out: int
    timestamp_ns: int  # low bit reserved for the staleness flag
    stale: bool = False

    def encode(self) -> bytes:
        ts = (self.timestamp_ns & ~1) | (1 if self.stale else 0)
        return struct.pack(">QQQQ", self.rtt_us, self.rate_in, self.rate_out, ts)

    @classmethod
    def decode(cls, payload: bytes) -> "NetworkStats":
        if len(payload) != RECORD_LEN:
            raise ValueError(f"stats record must be {RECORD_LEN} bytes, got {len(payload)}")
        rtt_us, rate_in, rate_out, ts = struct.unpack(">QQQQ", payload)
        return cls(
            rtt_us=rtt_us,
            rate_in=rate_in,
            rate_out=rate_out,
            timestamp_ns=ts & ~1,
            stale=bool(ts & 1),
        )

    @property
    def rtt_ms(self) -> float:
        return self.rtt_us / 1000.0


class Ewma:
    """Exponentially weighted moving average; first sample initializes."""

    def __init__(self, alpha: float = EWMA_ALPHA):
        self.alpha = alpha
        self.value: Optional[float] = None

    def update(self, sample: float) -> float:
        if self.value is None:
            self.value = sample
        else:
            self.value += self.alpha * (sample - self.value)
        return self.value


class RateTracker:
    """Bytes-per-second over the window between consecutive samples."""

    def __init__(self):
        self._prev_count: Optional[int] = None
        self._prev_t: float = 0.0
        self.rate = 0.0

    def update(self, count: int, now: Optional[float] = None) -> float:
        now = time.monotonic() if now is None else now
        if self._prev_count is not None and now > self._prev_t:
            delta = count - self._prev_count
            self.rate = max(0.0, delta / (now - self._prev_t))
        self._prev_count = count
        self._prev_t = now
        return self.rate


class NetMonitor:
    """Publishes latency/throughput for one side, only while subscribed.

    ``probe_rtt`` performs one round trip and returns seconds (None when
    the probed path is down); ``counters`` returns cumulative
    (bytes_in, bytes_out) of the monitored link.
    """

    def __init__(
        self,
        node: Node,
        probe_rtt: Callable[[], Optional[float]],
        counters: Callable[[], tuple[int, int]] = lambda: (0, 0),
        interval: float = DEFAULT_PROBE_INTERVAL,
    ):
        self._node = node
        self._probe_rtt = probe_rtt
        self._counters = counters
        self.interval = interval
        self.rtt_ewma = Ewma()
        self._rate_in = RateTracker()
        self._rate_out = RateTracker()
        self._lat_pub = node.advertise(LATENCY_TOPIC)
        self._thr_pub = node.advertise(THROUGHPUT_TOPIC)
        self.latency_samples_published = 0
        self.throughput_samples_published = 0
        self.probes_sent = 0
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._run, name="netmon", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()

    def _run(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.tick()
            except Exception:
                log.exception("monitor tick failed")

    def tick(self) -> None:
        """One probe cycle; separated out so tests can drive it directly."""
        try:
            snap = self._node.snapshot()
        except RegistryUnavailable:
            return
        bytes_in, bytes_out = self._counters()
        rate_in = self._rate_in.update(bytes_in)
        rate_out = self._rate_out.update(bytes_out)

        def has_subscriber(topic: str) -> bool:
            rec = snap.get(topic)
            return bool(rec and rec.subscribers)

        if has_subscriber(LATENCY_TOPIC):
            self.probes_sent += 1
            rtt = self._probe_rtt()
            stale = rtt is None
            if not stale:
                self.rtt_ewma.update(rtt * 1000.0)
            if self.rtt_ewma.value is not None:
                self._lat_pub.publish(self._record(rate_in, rate_out, stale).encode())
                self.latency_samples_published += 1
        if has_subscriber(THROUGHPUT_TOPIC):
            self._thr_pub.publish(self._record(rate_in, rate_out, False).encode())
            self.throughput_samples_published += 1

    def _record(self, rate_in: float, rate_out: float, stale: bool) -> NetworkStats:
        rtt_ms = self.rtt_ewma.value or 0.0
        return NetworkStats(
            rtt_us=round(rtt_ms * 1000),
            rate_in=round(rate_in),
            rate_out=round(rate_out),
            timestamp_ns=time.time_ns(),
            stale=stale,
        )
