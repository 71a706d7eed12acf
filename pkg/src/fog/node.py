"""Node runtime: advertise/subscribe on topics, deliver in publish order.

A node owns one listen endpoint and one registry connection. Publishers dial
the subscribers the registry names (synchronously at advertise time, lazily
for peers announced later) and push DATA frames over direct connections;
there is no same-machine shortcut, so local and remote delivery share one
code path. Delivery is best-effort: bounded queues drop oldest, and messages
sent while a link is down are lost, never reordered.

On registry or peer loss the node retries with exponential backoff and
re-registers everything idempotently; its identity (node_id, listen port)
survives reconnects.
"""

from __future__ import annotations

import collections
import logging
import os
import random
import threading
import time
import uuid
from dataclasses import dataclass
from typing import Iterator, Optional

from . import transport, wire
from .registry import (
    PUB,
    SUB,
    Endpoint,
    RegistryClient,
    RegistryUnavailable,
)
from .transport import ConnectionClosed, FrameConnection, Listener, parse_json_body
from .wire import FrameKind, MessageEnvelope, Origin

log = logging.getLogger(__name__)

DEFAULT_QUEUE_CAPACITY = 16
PUBLISH_OUTBOX_FRAMES = 1024
_MAINTENANCE_TICK = 0.1


class NodeShutDown(Exception):
    """Operation on a node that has been closed."""


class GiveUp(Exception):
    """Reconnect loop exceeded its configured maximum elapsed time."""


@dataclass(frozen=True)
class Backoff:
    """Exponential backoff: initial * factor^n, capped, with +/-jitter."""

    initial: float = 0.2
    factor: float = 2.0
    cap: float = 5.0
    jitter: float = 0.2
    max_elapsed: Optional[float] = None

    def delays(self) -> Iterator[float]:
        elapsed = 0.0
        delay = self.initial
        while True:
            if self.max_elapsed is not None and elapsed >= self.max_elapsed:
                return
            jittered = delay * (1 + random.uniform(-self.jitter, self.jitter))
            yield jittered
            elapsed += jittered
            delay = min(delay * self.factor, self.cap)

    @classmethod
    def from_env(cls) -> "Backoff":
        return cls(
            initial=float(os.environ.get("FOG_BACKOFF_INITIAL_MS", 200)) / 1000,
            cap=float(os.environ.get("FOG_BACKOFF_CAP_MS", 5000)) / 1000,
        )


class Subscription:
    """Bounded drop-oldest queue of envelopes for one topic."""

    def __init__(self, node: "Node", topic: str, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.topic = topic
        self.capacity = capacity
        self.delivered = 0
        self.dropped = 0
        self._node = node
        self._queue: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False

    def _push(self, env: MessageEnvelope) -> None:
        with self._cond:
            if self._closed:
                return
            if len(self._queue) >= self.capacity:
                self._queue.popleft()
                self.dropped += 1
            self._queue.append(env)
            self._cond.notify()

    def get(self, timeout: Optional[float] = None) -> Optional[MessageEnvelope]:
        """Next envelope in arrival order, or None on timeout/close."""
        with self._cond:
            if not self._cond.wait_for(lambda: self._queue or self._closed, timeout):
                return None
            if not self._queue:
                return None
            env = self._queue.popleft()
            self.delivered += 1
            return env

    def __iter__(self) -> Iterator[MessageEnvelope]:
        while True:
            env = self.get()
            if env is None:
                return
            yield env

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._node._drop_subscription(self)


class _PeerLink:
    """One outbound connection from a publisher to a subscriber endpoint."""

    def __init__(self, publisher: "Publisher", endpoint: Endpoint):
        self.endpoint = endpoint
        self.alive = True
        self._publisher = publisher
        self._outbox: collections.deque = collections.deque()
        self._cond = threading.Condition()
        node = publisher._node
        self._conn = transport.connect(endpoint.address, timeout=2.0)
        self._conn.send_json(
            FrameKind.HELLO,
            {
                "topic": publisher.topic,
                "name": node.name,
                "id": node.node_id.hex(),
            },
        )
        self._writer = threading.Thread(
            target=self._drain, name=f"pub-{publisher.topic}", daemon=True
        )
        self._writer.start()

    def enqueue(self, frame: bytes) -> None:
        with self._cond:
            if not self.alive:
                return
            if len(self._outbox) >= PUBLISH_OUTBOX_FRAMES:
                self._outbox.popleft()
            self._outbox.append(frame)
            self._cond.notify()

    def _drain(self) -> None:
        while True:
            with self._cond:
                self._cond.wait_for(lambda: self._outbox or not self.alive)
                if not self.alive and not self._outbox:
                    return
                frame = self._outbox.popleft()
            try:
                self._conn._sock.sendall(frame)
            except OSError:
                self.close()
                self._publisher._link_died(self)
                return

    def close(self) -> None:
        with self._cond:
            self.alive = False
            self._cond.notify_all()
        self._conn.close()


class Publisher:
    """Publishing handle for one (node, topic); safe for concurrent publish."""

    def __init__(self, node: "Node", topic: str):
        self.topic = topic
        self._node = node
        self._seq = 0
        self._seq_lock = threading.Lock()
        self._lock = threading.Lock()
        self._desired: dict[bytes, Endpoint] = {}
        self._links: dict[bytes, _PeerLink] = {}
        self._retry_at: dict[bytes, float] = {}

    @property
    def last_seq(self) -> int:
        return self._seq

    @property
    def connected_count(self) -> int:
        with self._lock:
            return len(self._links)

    def publish(self, payload: bytes) -> int:
        """Stamp and send one message; returns the assigned sequence number."""
        node = self._node
        if node.closed:
            raise NodeShutDown(f"publish on closed node {node.name}")
        if len(payload) > wire.MAX_PAYLOAD:
            raise wire.OversizePayload(f"payload of {len(payload)} bytes over cap")
        with self._seq_lock:
            self._seq += 1
            env = MessageEnvelope(
                topic=self.topic,
                publisher_id=node.node_id,
                seq=self._seq,
                origin=node.origin,
                timestamp_ns=time.time_ns(),
                payload=payload,
                trace=(node.name,) if node.trace else (),
            )
            self._fan_out(env)
            return self._seq

    def publish_envelope(self, env: MessageEnvelope) -> None:
        """Send a pre-stamped envelope unchanged (bridge republication path)."""
        if self._node.closed:
            raise NodeShutDown(f"publish on closed node {self._node.name}")
        with self._seq_lock:
            self._fan_out(env)

    def _fan_out(self, env: MessageEnvelope) -> None:
        frame = wire.encode_frame(FrameKind.DATA, env)
        with self._lock:
            links = list(self._links.values())
        for link in links:
            link.enqueue(frame)

    # -- peer set maintenance ------------------------------------------------

    def _set_desired(self, peers: list[Endpoint]) -> None:
        # Self-subscriptions are kept: a node that subscribes to its own
        # topic receives its own messages through the same path as any peer.
        with self._lock:
            self._desired = {p.node_id: p for p in peers}

    def _add_desired(self, peer: Endpoint) -> None:
        with self._lock:
            self._desired[peer.node_id] = peer

    def _remove_desired(self, node_id: bytes) -> None:
        with self._lock:
            self._desired.pop(node_id, None)
            link = self._links.pop(node_id, None)
            self._retry_at.pop(node_id, None)
        if link:
            link.close()

    def _link_died(self, link: _PeerLink) -> None:
        with self._lock:
            if self._links.get(link.endpoint.node_id) is link:
                del self._links[link.endpoint.node_id]
                self._retry_at[link.endpoint.node_id] = (
                    time.monotonic() + self._node.backoff.initial
                )

    def _connect_missing(self, immediate: bool = False) -> None:
        now = time.monotonic()
        with self._lock:
            missing = [
                ep
                for nid, ep in self._desired.items()
                if nid not in self._links and (immediate or self._retry_at.get(nid, 0) <= now)
            ]
        for ep in missing:
            try:
                link = _PeerLink(self, ep)
            except OSError:
                with self._lock:
                    self._retry_at[ep.node_id] = now + self._node.backoff.initial
                continue
            with self._lock:
                if ep.node_id in self._desired and ep.node_id not in self._links:
                    self._links[ep.node_id] = link
                    self._retry_at.pop(ep.node_id, None)
                else:
                    link.close()

    def _close_all(self) -> None:
        with self._lock:
            links = list(self._links.values())
            self._links.clear()
        for link in links:
            link.close()


class Node:
    """A running node: one listen endpoint, one registry identity."""

    def __init__(
        self,
        name: str,
        registry: str,
        origin: "Origin | str" = Origin.EDGE,
        trace: bool = False,
        listen_host: str = "127.0.0.1",
        port_range: Optional[tuple[int, int]] = None,
        allowed_ports=None,
        ping_interval: float = 2.0,
        backoff: Optional[Backoff] = None,
        connect_timeout: float = 10.0,
        node_id: Optional[bytes] = None,
    ):
        self.name = name
        self.node_id = node_id or uuid.uuid4().bytes
        self.origin = Origin[origin.upper()] if isinstance(origin, str) else origin
        self.trace = trace
        self.backoff = backoff or Backoff()
        self.closed = False
        self.reconnect_count = 0
        self.registry_address = registry
        self._ping_interval = ping_interval
        self._publishers: dict[str, Publisher] = {}
        self._subscriptions: dict[str, list[Subscription]] = {}
        self._reg_lock = threading.Lock()
        self._client: Optional[RegistryClient] = None
        self._client_up = threading.Event()
        self._listener = Listener(
            self._serve_inbound,
            host=listen_host,
            port_range=port_range,
            allowed_ports=allowed_ports,
            name=f"node-{name}",
        )
        self.endpoint = Endpoint(name=name, node_id=self.node_id, address=self._listener.address)
        self._supervisor = threading.Thread(
            target=self._registry_loop, name=f"reg-{name}", daemon=True
        )
        self._supervisor.start()
        self._maintainer = threading.Thread(
            target=self._maintain_loop, name=f"links-{name}", daemon=True
        )
        self._maintainer.start()
        if not self._client_up.wait(connect_timeout):
            self.close()
            raise RegistryUnavailable(f"no registry at {registry} within {connect_timeout}s")

    @classmethod
    def from_env(cls, name: Optional[str] = None, **overrides) -> "Node":
        env = os.environ
        kwargs = dict(
            name=name or env.get("FOG_NODE_NAME", f"node-{os.getpid()}"),
            registry=env["FOG_MASTER"],
            origin=env.get("FOG_ORIGIN", "edge"),
            trace=env.get("FOG_TRACE", "0") == "1",
            port_range=transport.port_range_from_env(),
            allowed_ports=transport.allowed_ports_from_env(),
            ping_interval=float(env.get("FOG_PING_INTERVAL_S", 2.0)),
            backoff=Backoff.from_env(),
        )
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def address(self) -> str:
        return self._listener.address

    # -- public API -----------------------------------------------------------

    def advertise(self, topic: str) -> Publisher:
        wire.validate_topic(topic)
        if self.closed:
            raise NodeShutDown(self.name)
        existing = self._publishers.get(topic)
        if existing is not None:
            return existing
        pub = Publisher(self, topic)
        self._publishers[topic] = pub
        peers = self._with_client(lambda c: c.register(topic, PUB))
        pub._set_desired(peers)
        pub._connect_missing(immediate=True)
        return pub

    def subscribe(self, topic: str, capacity: int = DEFAULT_QUEUE_CAPACITY) -> Subscription:
        wire.validate_topic(topic)
        if self.closed:
            raise NodeShutDown(self.name)
        sub = Subscription(self, topic, capacity)
        self._subscriptions.setdefault(topic, []).append(sub)
        self._with_client(lambda c: c.register(topic, SUB))
        return sub

    def unadvertise(self, topic: str) -> None:
        pub = self._publishers.pop(topic, None)
        if pub is None:
            return
        pub._close_all()
        try:
            self._with_client(lambda c: c.unregister(topic, PUB))
        except RegistryUnavailable:
            pass

    def snapshot(self):
        return self._with_client(lambda c: c.snapshot())

    def ping_registry(self) -> float:
        return self._with_client(lambda c: c.ping())

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        client = self._client
        if client is not None:
            for topic in list(self._publishers):
                try:
                    client.unregister(topic, PUB)
                except Exception:
                    break
            for topic in list(self._subscriptions):
                try:
                    client.unregister(topic, SUB)
                except Exception:
                    break
            client.close()
        self._listener.close()
        for pub in self._publishers.values():
            pub._close_all()
        for subs in list(self._subscriptions.values()):
            for sub in list(subs):
                sub.close()

    def __enter__(self) -> "Node":
        return self

    def __exit__(self, *_exc) -> None:
        self.close()

    # -- registry supervision ---------------------------------------------------

    def _with_client(self, fn):
        client = self._client
        if client is None:
            raise RegistryUnavailable("registry connection down (reconnecting)")
        return fn(client)

    def _registry_loop(self) -> None:
        delays = None
        while not self.closed:
            client = None
            try:
                client = RegistryClient(
                    self.registry_address,
                    self.endpoint,
                    on_event=self._on_registry_event,
                    ping_interval=self._ping_interval,
                )
                self._reregister(client)
            except RegistryUnavailable:
                if client is not None:
                    client.close()
                client = None
            if client is not None:
                self._client = client
                self._client_up.set()
                delays = None
                while client.alive and not self.closed:
                    time.sleep(0.05)
                self._client = None
                client.close()
            if self.closed:
                return
            self.reconnect_count += 1
            if delays is None:
                delays = self.backoff.delays()
            try:
                time.sleep(next(delays))
            except StopIteration:
                log.error("node %s: giving up on registry %s", self.name, self.registry_address)
                return

    def _reregister(self, client: RegistryClient) -> None:
        for topic, pub in list(self._publishers.items()):
            pub._set_desired(client.register(topic, PUB))
        for topic in list(self._subscriptions):
            client.register(topic, SUB)

    def _on_registry_event(self, msg: dict) -> None:
        try:
            endpoint = Endpoint.from_json(msg["endpoint"])
        except (KeyError, ValueError):
            return
        topic, role, event = msg.get("topic"), msg.get("role"), msg.get("event")
        pub = self._publishers.get(topic)
        if pub is None or role != SUB:
            return
        if event == "peer_added":
            pub._add_desired(endpoint)
        elif event == "peer_removed":
            pub._remove_desired(endpoint.node_id)

    def _maintain_loop(self) -> None:
        while not self.closed:
            time.sleep(_MAINTENANCE_TICK)
            for pub in list(self._publishers.values()):
                try:
                    pub._connect_missing()
                except Exception:
                    log.exception("link maintenance failed")

    # -- inbound data plane -------------------------------------------------------

    def _serve_inbound(self, conn: FrameConnection, peer: str) -> None:
        try:
            kind, body = conn.recv(timeout=5.0)
            if kind is not FrameKind.HELLO:
                return
            hello = parse_json_body(body)
            topic = hello.get("topic", "")
            while True:
                kind, body = conn.recv()
                if kind is FrameKind.DATA:
                    for sub in self._subscriptions.get(topic, []):
                        sub._push(body)
        except (ConnectionClosed, wire.CodecError, OSError):
            pass
        finally:
            conn.close()

    def _drop_subscription(self, sub: Subscription) -> None:
        subs = self._subscriptions.get(sub.topic)
        if subs and sub in subs:
            subs.remove(sub)
            if not subs and not self.closed:
                del self._subscriptions[sub.topic]
                try:
                    self._with_client(lambda c: c.unregister(sub.topic, SUB))
                except RegistryUnavailable:
                    pass
