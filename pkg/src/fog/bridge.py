"""Two-endpoint topic bridge between the edge and cloud registries.

One endpoint runs beside each registry, joined by a single secure channel.
Each endpoint polls its own registry, exchanges (topic, has_pub, has_sub)
summaries with its peer over CTRL frames, and both converge on the same
bridge table: a topic is tunneled in a direction exactly while it has a
publisher on the source side and a subscriber on the target side. Nothing
else ever crosses the channel as DATA (lazy tunneling).

Forwarded envelopes keep their original publisher identity, sequence
number, origin, and payload; each endpoint appends its hop label when
tracing. An envelope whose origin equals the far side, or whose trace
already carries a bridge hop, is never forwarded again -- without this,
topics with publishers and subscribers on both sides would echo forever.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional

from . import channel as channel_mod
from .channel import AuthMismatch, ChannelError, SecureChannel
from .netmon import NetMonitor
from .node import Backoff, Node, NodeShutDown, Publisher, Subscription
from .registry import RegistryTable, RegistryUnavailable
from .transport import FrameConnection, split_address
from .wire import FrameKind, MessageEnvelope, Origin

log = logging.getLogger(__name__)

EDGE_TO_CLOUD = "edge->cloud"
CLOUD_TO_EDGE = "cloud->edge"
HOP_PREFIX = "bridge:"
DEFAULT_POLL_INTERVAL = 0.5
FORWARD_QUEUE_CAPACITY = 64


@dataclass(frozen=True)
class BridgeEntry:
    topic: str
    direction: str  # EDGE_TO_CLOUD | CLOUD_TO_EDGE


BridgeTable = set


@dataclass(frozen=True)
class TopicPolicy:
    """AUTO discovers topics by polling; EXPLICIT restricts to a fixed list."""

    topics: Optional[tuple[str, ...]] = None  # None = AUTO
    poll_interval: float = DEFAULT_POLL_INTERVAL

    @property
    def explicit(self) -> bool:
        return self.topics is not None


Presence = dict[str, tuple[bool, bool]]  # topic -> (has_pub, has_sub)


def presence_of(table: RegistryTable, exclude_node_id: Optional[bytes] = None) -> Presence:
    out: Presence = {}
    for topic, rec in table.items():
        pubs = {e for e in rec.publishers if e.node_id != exclude_node_id}
        subs = {e for e in rec.subscribers if e.node_id != exclude_node_id}
        if pubs or subs:
            out[topic] = (bool(pubs), bool(subs))
    return out


def discover_from_presence(edge: Presence, cloud: Presence) -> "BridgeTable[BridgeEntry]":
    entries = set()
    for topic in set(edge) | set(cloud):
        edge_pub, edge_sub = edge.get(topic, (False, False))
        cloud_pub, cloud_sub = cloud.get(topic, (False, False))
        if edge_pub and cloud_sub:
            entries.add(BridgeEntry(topic, EDGE_TO_CLOUD))
        if cloud_pub and edge_sub:
            entries.add(BridgeEntry(topic, CLOUD_TO_EDGE))
    return entries


def discover_bridgeable(edge: RegistryTable, cloud: RegistryTable) -> "BridgeTable[BridgeEntry]":
    """Pure discovery rule over two registry snapshots."""
    return discover_from_presence(presence_of(edge), presence_of(cloud))


class ProxyEndpoint:
    """One side of the bridge: local registry node + channel session."""

    def __init__(
        self,
        side: str,
        registry: str,
        secret: bytes,
        channel_listen_port: Optional[int] = None,
        channel_connect: Optional[str] = None,
        policy: TopicPolicy = TopicPolicy(),
        trace: bool = False,
        node_name: Optional[str] = None,
        stats_path: Optional[str] = None,
        backoff: Optional[Backoff] = None,
        monitor_interval: float = 1.0,
        listen_host: str = "127.0.0.1",
        port_range=None,
        allowed_ports=None,
    ):
        if side not in ("edge", "cloud"):
            raise ValueError(f"side must be edge or cloud, got {side!r}")
        if (channel_listen_port is None) == (channel_connect is None):
            raise ValueError("exactly one of channel_listen_port/channel_connect required")
        self.side = side
        self.far_origin = Origin.CLOUD if side == "edge" else Origin.EDGE
        self.hop_label = f"{HOP_PREFIX}{side}"
        self.secret = secret
        self.policy = policy
        self.trace = trace
        self.stats_path = stats_path
        self.backoff = backoff or Backoff()
        self.reconnects = 0
        self._sessions_established = 0
        self.fatal_error: Optional[str] = None
        self._holdoff_until = 0.0
        self._closing = False
        self._session: Optional[SecureChannel] = None
        self._session_lock = threading.Lock()
        self._closed_frames_sent: dict[int, int] = {}
        self._closed_frames_received: dict[int, int] = {}
        self._closed_bytes = [0, 0]  # in, out
        self._peer_presence: Presence = {}
        self._table_lock = threading.Lock()
        self.bridge_table: BridgeTable[BridgeEntry] = set()
        self._outbound: dict[str, Subscription] = {}
        self._inbound: dict[str, Publisher] = {}
        self._forwarders: dict[str, threading.Thread] = {}
        self._pong_waiters: dict[str, tuple[threading.Event, list]] = {}

        self.node = Node(
            name=node_name or f"fogproxy-{side}",
            registry=registry,
            origin=side,
            trace=trace,
            listen_host=listen_host,
            port_range=port_range,
            allowed_ports=allowed_ports,
            backoff=self.backoff,
        )
        self.monitor = NetMonitor(
            self.node,
            probe_rtt=self._probe_rtt,
            counters=self.data_byte_counters,
            interval=monitor_interval,
        )

        self._accept_sock: Optional[socket.socket] = None
        if channel_listen_port is not None:
            self._accept_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._accept_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            if hasattr(socket, "SO_REUSEPORT"):
                self._accept_sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
            self._accept_sock.bind((listen_host, channel_listen_port))
            self._accept_sock.listen(4)
            self.channel_port = self._accept_sock.getsockname()[1]
        self._channel_connect = channel_connect

        self._threads = [
            threading.Thread(target=self._session_loop, name=f"bridge-{side}-session", daemon=True),
            threading.Thread(target=self._discovery_loop, name=f"bridge-{side}-discovery", daemon=True),
        ]
        for t in self._threads:
            t.start()
        self.monitor.start()
        if stats_path:
            threading.Thread(target=self._stats_loop, name=f"bridge-{side}-stats", daemon=True).start()

    # -- channel session management -------------------------------------------

    @property
    def session(self) -> Optional[SecureChannel]:
        return self._session

    @property
    def established(self) -> bool:
        s = self._session
        return s is not None and not s.closed

    def inject_channel_fault(self, blackout_s: float = 2.0) -> None:
        """Chaos hook: drop the channel and refuse to touch it for a while."""
        self._holdoff_until = time.monotonic() + blackout_s
        self._drop_session()

    def _drop_session(self) -> None:
        with self._session_lock:
            session, self._session = self._session, None
        if session is not None:
            self._fold_counters(session)
            session.close()

    def _install_session(self, session: SecureChannel) -> None:
        self._drop_session()
        with self._session_lock:
            self._session = session
        threading.Thread(
            target=self._channel_reader, args=(session,),
            name=f"bridge-{self.side}-reader", daemon=True,
        ).start()
        self._send_summary()

    def _session_loop(self) -> None:
        delays = None
        while not self._closing:
            if time.monotonic() < self._holdoff_until:
                time.sleep(0.05)
                continue
            if self.established:
                time.sleep(0.1)
                continue
            try:
                if self._accept_sock is not None:
                    self._accept_sock.settimeout(0.5)
                    try:
                        raw, _ = self._accept_sock.accept()
                    except socket.timeout:
                        continue
                    session = channel_mod.handshake_responder(FrameConnection(raw), self.secret)
                else:
                    host, port = split_address(self._channel_connect)
                    raw = socket.create_connection((host, port), timeout=2.0)
                    session = channel_mod.handshake_initiator(FrameConnection(raw), self.secret)
            except AuthMismatch as exc:
                if self._accept_sock is not None:
                    log.warning("bridge-%s: rejected peer: %s", self.side, exc)
                    continue
                self.fatal_error = f"channel authentication failed: {exc}"
                log.error("bridge-%s: %s", self.side, self.fatal_error)
                return
            except (OSError, ChannelError) as exc:
                if delays is None:
                    delays = self.backoff.delays()
                try:
                    time.sleep(min(next(delays), 0.5))
                except StopIteration:
                    self.fatal_error = "channel reconnect gave up"
                    return
                continue
            delays = None
            self._sessions_established += 1
            if self._sessions_established > 1:
                self.reconnects += 1
            self._install_session(session)

    def _channel_reader(self, session: SecureChannel) -> None:
        try:
            while not self._closing and not session.closed:
                try:
                    kind, body = session.recv(timeout=0.5)
                except socket.timeout:
                    continue
                if kind is FrameKind.DATA:
                    self._republish(body)
                elif kind is FrameKind.CTRL:
                    self._on_control(session, body)
                elif kind is FrameKind.PING:
                    session.send(FrameKind.PONG, body)
                elif kind is FrameKind.PONG:
                    msg = json.loads(body.decode("utf-8"))
                    waiter = self._pong_waiters.get(msg.get("token"))
                    if waiter:
                        waiter[1].append(msg)
                        waiter[0].set()
        except ChannelError as exc:
            log.info("bridge-%s: channel reader stopped: %s", self.side, exc)
        except Exception:
            log.exception("bridge-%s: channel reader crashed", self.side)
        finally:
            if self._session is session:
                self._drop_session()
            else:
                session.close()

    def _fold_counters(self, session: SecureChannel) -> None:
        for kind, n in session.frames_sent.items():
            self._closed_frames_sent[kind] = self._closed_frames_sent.get(kind, 0) + n
        for kind, n in session.frames_received.items():
            self._closed_frames_received[kind] = self._closed_frames_received.get(kind, 0) + n
        self._closed_bytes[0] += session.data_bytes_in
        self._closed_bytes[1] += session.data_bytes_out

    def frame_counters(self) -> tuple[dict[int, int], dict[int, int]]:
        """Cumulative (sent, received) frame counts by kind across sessions."""
        sent = dict(self._closed_frames_sent)
        received = dict(self._closed_frames_received)
        session = self._session
        if session is not None:
            for kind, n in session.frames_sent.items():
                sent[kind] = sent.get(kind, 0) + n
            for kind, n in session.frames_received.items():
                received[kind] = received.get(kind, 0) + n
        return sent, received

    def data_byte_counters(self) -> tuple[int, int]:
        bytes_in, bytes_out = self._closed_bytes
        session = self._session
        if session is not None:
            bytes_in += session.data_bytes_in
            bytes_out += session.data_bytes_out
        return bytes_in, bytes_out

    # -- discovery -----------------------------------------------------------

    def _discovery_loop(self) -> None:
        while not self._closing:
            time.sleep(self.policy.poll_interval)
            try:
                self._send_summary()
                self._reconcile()
            except Exception:
                log.exception("bridge-%s: discovery tick failed", self.side)

    def _local_presence(self) -> Presence:
        try:
            snap = self.node.snapshot()
        except RegistryUnavailable:
            return {}
        return presence_of(snap, exclude_node_id=self.node.node_id)

    def _send_summary(self) -> None:
        session = self._session
        if session is None:
            return
        presence = self._local_presence()
        topics = [[t, p, s] for t, (p, s) in sorted(presence.items())]
        try:
            session.send(FrameKind.CTRL, channel_mod.control_body({"op": "summary", "topics": topics}))
        except ChannelError:
            pass

    def _on_control(self, session: SecureChannel, body: bytes) -> None:
        try:
            msg = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError):
            return
        if msg.get("op") == "summary":
            self._peer_presence = {
                t: (bool(p), bool(s)) for t, p, s in msg.get("topics", [])
            }
            self._reconcile()

    def _reconcile(self) -> None:
        with self._table_lock:
            local = self._local_presence()
            peer = self._peer_presence
            if self.side == "edge":
                table = discover_from_presence(local, peer)
            else:
                table = discover_from_presence(peer, local)
            if self.policy.explicit:
                allowed = set(self.policy.topics)
                table = {e for e in table if e.topic in allowed}
            self.bridge_table = table
            out_dir = EDGE_TO_CLOUD if self.side == "edge" else CLOUD_TO_EDGE
            in_dir = CLOUD_TO_EDGE if self.side == "edge" else EDGE_TO_CLOUD
            want_out = {e.topic for e in table if e.direction == out_dir}
            want_in = {e.topic for e in table if e.direction == in_dir}

            for topic in want_out - set(self._outbound):
                try:
                    sub = self.node.subscribe(topic, capacity=FORWARD_QUEUE_CAPACITY)
                except (RegistryUnavailable, NodeShutDown):
                    continue
                self._outbound[topic] = sub
                thread = threading.Thread(
                    target=self._forward_loop, args=(topic, sub),
                    name=f"fwd-{self.side}{topic}", daemon=True,
                )
                self._forwarders[topic] = thread
                thread.start()
            for topic in set(self._outbound) - want_out:
                self._outbound.pop(topic).close()
                self._forwarders.pop(topic, None)

            for topic in want_in - set(self._inbound):
                try:
                    self._inbound[topic] = self.node.advertise(topic)
                except (RegistryUnavailable, NodeShutDown):
                    continue
            for topic in set(self._inbound) - want_in:
                self._inbound.pop(topic, None)
                try:
                    self.node.unadvertise(topic)
                except (RegistryUnavailable, NodeShutDown):
                    pass

    # -- forwarding -----------------------------------------------------------

    def _forward_loop(self, topic: str, sub: Subscription) -> None:
        while not self._closing:
            session = self._session
            if session is None:
                if sub._closed:
                    return
                time.sleep(0.05)  # channel down: let the queue buffer
                continue
            env = sub.get(timeout=0.2)
            if env is None:
                if sub._closed:
                    return
                continue
            if env.origin == self.far_origin:
                continue  # already crossed: republication echoing back
            if any(h.startswith(HOP_PREFIX) for h in env.trace):
                continue  # hop trace says a bridge carried it already
            if self.trace:
                env = env.with_hop(self.hop_label)
            try:
                session.send(FrameKind.DATA, env)
            except ChannelError:
                pass  # best-effort: envelope dropped while channel is down

    def _republish(self, env: MessageEnvelope) -> None:
        pub = self._inbound.get(env.topic)
        if pub is None:
            return  # topic no longer bridged on this side
        if self.trace:
            env = env.with_hop(self.hop_label)
        try:
            pub.publish_envelope(env)
        except NodeShutDown:
            pass

    # -- monitoring ------------------------------------------------------------

    def _probe_rtt(self) -> Optional[float]:
        session = self._session
        if session is None:
            return None
        token = f"{time.monotonic_ns()}"
        event = threading.Event()
        slot: list = []
        self._pong_waiters[token] = (event, slot)
        start = time.monotonic()
        try:
            session.send(FrameKind.PING, channel_mod.control_body({"token": token}))
            if not event.wait(1.0):
                return None
        except ChannelError:
            return None
        finally:
            self._pong_waiters.pop(token, None)
        return time.monotonic() - start

    # -- introspection -----------------------------------------------------------

    def stats(self) -> dict:
        sent, received = self.frame_counters()
        bytes_in, bytes_out = self.data_byte_counters()
        return {
            "side": self.side,
            "established": self.established,
            "reconnects": self.reconnects,
            "fatal_error": self.fatal_error,
            "key_id": self._session.key_id if self._session else None,
            "bridge": sorted([e.topic, e.direction] for e in self.bridge_table),
            "frames_sent": {FrameKind(k).name: v for k, v in sorted(sent.items())},
            "frames_received": {FrameKind(k).name: v for k, v in sorted(received.items())},
            "data_bytes_in": bytes_in,
            "data_bytes_out": bytes_out,
            "rtt_ms": self.monitor.rtt_ewma.value,
            "latency_samples": self.monitor.latency_samples_published,
            "ts": time.time(),
        }

    def _stats_loop(self) -> None:
        while not self._closing:
            self.dump_stats()
            time.sleep(1.0)
        self.dump_stats()

    def dump_stats(self) -> None:
        if not self.stats_path:
            return
        tmp = f"{self.stats_path}.tmp"
        try:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(self.stats(), fh)
            os.replace(tmp, self.stats_path)
        except OSError:
            log.warning("bridge-%s: cannot write stats to %s", self.side, self.stats_path)

    def close(self) -> None:
        self._closing = True
        self.monitor.stop()
        if self._accept_sock is not None:
            try:
                self._accept_sock.close()
            except OSError:
                pass
        self._drop_session()
        self.node.close()
        self.dump_stats()


def run_proxy_pair(
    edge_registry: str,
    cloud_registry: str,
    secret: bytes,
    policy: TopicPolicy = TopicPolicy(),
    trace: bool = False,
    **kw,
) -> tuple[ProxyEndpoint, ProxyEndpoint]:
    """In-process proxy pair, cloud side listening, edge side dialing."""
    cloud = ProxyEndpoint(
        "cloud", cloud_registry, secret, channel_listen_port=0,
        policy=policy, trace=trace, **kw,
    )
    edge = ProxyEndpoint(
        "edge", edge_registry, secret,
        channel_connect=f"127.0.0.1:{cloud.channel_port}",
        policy=policy, trace=trace, **kw,
    )
    return edge, cloud
