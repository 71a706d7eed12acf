"""Topic registry: tracks publishers and subscribers, hands out peer lists.

One registry serves one side of a deployment (or the whole deployment in
direct networking mode). Nodes hold a persistent connection to it; liveness
is connection-based with a PING heartbeat on top, so an endpoint whose
process dies is expunged from every topic it registered on.

Protocol (JSON control bodies over wire frames):

    HELLO {rid, node:{name,id,address}}        -> CTRL {re, ok}
    SUB   {rid, topic, role: "pub"|"sub"}      -> CTRL {re, ok, peers:[...]}
    UNSUB {rid, topic, role}                   -> CTRL {re, ok}
    STAT  {rid}                                -> STAT {re, table}
    PING  {t}                                  -> PONG {t}
    CTRL  {event: "peer_added"|"peer_removed", topic, role, endpoint}   (push)
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import transport, wire
from .transport import ConnectionClosed, FrameConnection, Listener, parse_json_body
from .wire import FrameKind

log = logging.getLogger(__name__)

DEFAULT_PING_INTERVAL = 2.0
DEFAULT_LIVENESS_TIMEOUT = 6.0

PUB = "pub"
SUB = "sub"


class RegistryUnavailable(Exception):
    """Transport-level failure talking to the registry; retryable."""


@dataclass(frozen=True)
class Endpoint:
    name: str
    node_id: bytes
    address: str

    def to_json(self) -> dict:
        return {"name": self.name, "id": self.node_id.hex(), "address": self.address}

    @classmethod
    def from_json(cls, obj: dict) -> "Endpoint":
        return cls(name=obj["name"], node_id=bytes.fromhex(obj["id"]), address=obj["address"])


@dataclass
class TopicRecord:
    publishers: set[Endpoint] = field(default_factory=set)
    subscribers: set[Endpoint] = field(default_factory=set)

    def role_set(self, role: str) -> set[Endpoint]:
        return self.publishers if role == PUB else self.subscribers

    def empty(self) -> bool:
        return not self.publishers and not self.subscribers


RegistryTable = dict[str, TopicRecord]


def copy_table(table: RegistryTable) -> RegistryTable:
    return {
        t: TopicRecord(set(rec.publishers), set(rec.subscribers))
        for t, rec in table.items()
    }


def table_to_json(table: RegistryTable) -> dict:
    return {
        t: {
            "pubs": [e.to_json() for e in rec.publishers],
            "subs": [e.to_json() for e in rec.subscribers],
        }
        for t, rec in table.items()
    }


def table_from_json(obj: dict) -> RegistryTable:
    return {
        t: TopicRecord(
            {Endpoint.from_json(e) for e in rec.get("pubs", [])},
            {Endpoint.from_json(e) for e in rec.get("subs", [])},
        )
        for t, rec in obj.items()
    }


class _ServerConn:
    """Server-side view of one node connection."""

    def __init__(self, conn: FrameConnection):
        self.conn = conn
        self.endpoint: Optional[Endpoint] = None
        self.last_seen = time.monotonic()
        self.registrations: set[tuple[str, str]] = set()
        self._outbox: queue.Queue = queue.Queue(maxsize=256)
        self._writer = threading.Thread(target=self._drain, daemon=True)
        self._writer.start()

    def push(self, kind: FrameKind, obj: dict) -> None:
        try:
            self._outbox.put_nowait((kind, obj))
        except queue.Full:
            log.warning("registry: dropping notification to %s", self.conn.peer)

    def _drain(self) -> None:
        while True:
            item = self._outbox.get()
            if item is None:
                return
            kind, obj = item
            try:
                self.conn.send_json(kind, obj)
            except ConnectionClosed:
                return

    def close(self) -> None:
        self._outbox.put(None)
        self.conn.close()


class RegistryServer:
    """Serializes table mutations; queries and notifications are concurrent."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 0,
        liveness_timeout: float = DEFAULT_LIVENESS_TIMEOUT,
        allowed_ports=None,
    ):
        self._lock = threading.Lock()
        self._table: RegistryTable = {}
        self._conns: dict[bytes, _ServerConn] = {}
        self._liveness_timeout = liveness_timeout
        self._closing = False
        self._listener = Listener(
            self._serve, host=host, port=port, allowed_ports=allowed_ports,
            name="registry",
        )
        self._sweeper = threading.Thread(target=self._sweep_loop, daemon=True)
        self._sweeper.start()

    @property
    def address(self) -> str:
        return self._listener.address

    @property
    def port(self) -> int:
        return self._listener.port

    def close(self) -> None:
        self._closing = True
        self._listener.close()
        with self._lock:
            conns = list(self._conns.values())
        for sc in conns:
            sc.close()

    def snapshot(self) -> RegistryTable:
        with self._lock:
            return copy_table(self._table)

    # -- connection handling ------------------------------------------------

    def _serve(self, conn: FrameConnection, peer: str) -> None:
        sc = _ServerConn(conn)
        try:
            while True:
                kind, body = conn.recv()
                sc.last_seen = time.monotonic()
                if kind is FrameKind.PING:
                    conn.send(FrameKind.PONG, body)
                    continue
                msg = parse_json_body(body)
                if kind is FrameKind.HELLO:
                    self._on_hello(sc, msg)
                elif kind is FrameKind.SUB:
                    self._on_register(sc, msg)
                elif kind is FrameKind.UNSUB:
                    self._on_unregister(sc, msg)
                elif kind is FrameKind.STAT:
                    self._on_snapshot(sc, msg)
                else:
                    self._reply(sc, msg, ok=False, error="unexpected-kind")
        except (ConnectionClosed, wire.CodecError, OSError):
            pass
        finally:
            self._expunge(sc)
            sc.close()

    def _reply(self, sc: _ServerConn, msg: dict, kind: FrameKind = FrameKind.CTRL, **extra) -> None:
        obj = {"re": msg.get("rid")}
        obj.update(extra)
        try:
            sc.conn.send_json(kind, obj)
        except ConnectionClosed:
            pass

    def _on_hello(self, sc: _ServerConn, msg: dict) -> None:
        node = msg.get("node") or {}
        try:
            sc.endpoint = Endpoint.from_json(node)
        except (KeyError, ValueError):
            self._reply(sc, msg, ok=False, error="bad-hello")
            return
        with self._lock:
            stale = self._conns.get(sc.endpoint.node_id)
            self._conns[sc.endpoint.node_id] = sc
        if stale is not None and stale is not sc:
            stale.close()
        self._reply(sc, msg, ok=True)

    def _on_register(self, sc: _ServerConn, msg: dict) -> None:
        topic, role = msg.get("topic", ""), msg.get("role", "")
        if sc.endpoint is None or role not in (PUB, SUB):
            self._reply(sc, msg, ok=False, error="bad-request")
            return
        try:
            wire.validate_topic(topic)
        except wire.InvalidTopic as exc:
            self._reply(sc, msg, ok=False, error="invalid-topic", detail=str(exc))
            return
        with self._lock:
            rec = self._table.setdefault(topic, TopicRecord())
            added = sc.endpoint not in rec.role_set(role)
            rec.role_set(role).add(sc.endpoint)
            sc.registrations.add((topic, role))
            peers = sorted(
                rec.role_set(SUB if role == PUB else PUB),
                key=lambda e: e.node_id,
            )
            notify = self._peers_to_notify(topic, role, sc.endpoint) if added else []
        self._reply(sc, msg, ok=True, peers=[e.to_json() for e in peers])
        self._notify(notify, "peer_added", topic, role, sc.endpoint)

    def _on_unregister(self, sc: _ServerConn, msg: dict) -> None:
        topic, role = msg.get("topic", ""), msg.get("role", "")
        if sc.endpoint is None or role not in (PUB, SUB):
            self._reply(sc, msg, ok=False, error="bad-request")
            return
        with self._lock:
            removed = self._remove_entry(topic, role, sc.endpoint)
            sc.registrations.discard((topic, role))
            notify = self._peers_to_notify(topic, role, sc.endpoint) if removed else []
        self._reply(sc, msg, ok=True)
        self._notify(notify, "peer_removed", topic, role, sc.endpoint)

    def _on_snapshot(self, sc: _ServerConn, msg: dict) -> None:
        with self._lock:
            table = table_to_json(self._table)
        self._reply(sc, msg, kind=FrameKind.STAT, ok=True, table=table)

    # -- table maintenance --------------------------------------------------

    def _remove_entry(self, topic: str, role: str, endpoint: Endpoint) -> bool:
        rec = self._table.get(topic)
        if rec is None or endpoint not in rec.role_set(role):
            return False
        rec.role_set(role).discard(endpoint)
        if rec.empty():
            del self._table[topic]
        return True

    def _peers_to_notify(self, topic: str, role: str, who: Endpoint) -> list[_ServerConn]:
        """Connections of the opposite role on ``topic`` (mutation lock held)."""
        rec = self._table.get(topic)
        if rec is None:
            return []
        targets = rec.role_set(SUB if role == PUB else PUB)
        return [
            self._conns[e.node_id]
            for e in targets
            if e.node_id != who.node_id and e.node_id in self._conns
        ]

    def _notify(self, conns: list[_ServerConn], event: str, topic: str, role: str, who: Endpoint) -> None:
        for sc in conns:
            sc.push(
                FrameKind.CTRL,
                {"event": event, "topic": topic, "role": role, "endpoint": who.to_json()},
            )

    def _expunge(self, sc: _ServerConn) -> None:
        if sc.endpoint is None:
            return
        with self._lock:
            if self._conns.get(sc.endpoint.node_id) is sc:
                del self._conns[sc.endpoint.node_id]
            removed = [
                (topic, role)
                for topic, role in list(sc.registrations)
                if self._remove_entry(topic, role, sc.endpoint)
            ]
            notify = [
                (self._peers_to_notify(topic, role, sc.endpoint), topic, role)
                for topic, role in removed
            ]
        for conns, topic, role in notify:
            self._notify(conns, "peer_removed", topic, role, sc.endpoint)

    def _sweep_loop(self) -> None:
        while not self._closing:
            time.sleep(min(0.5, self._liveness_timeout / 4))
            deadline = time.monotonic() - self._liveness_timeout
            with self._lock:
                dead = [sc for sc in self._conns.values() if sc.last_seen < deadline]
            for sc in dead:
                log.info("registry: expiring silent node %s", sc.endpoint)
                sc.close()  # reader thread sees EOF and expunges


class RegistryClient:
    """One connection to a registry. Fail-fast; reconnection lives above."""

    def __init__(
        self,
        address: str,
        endpoint: Endpoint,
        on_event: Optional[Callable[[dict], None]] = None,
        ping_interval: float = DEFAULT_PING_INTERVAL,
        timeout: float = 5.0,
    ):
        self._endpoint = endpoint
        self._on_event = on_event
        self._timeout = timeout
        self._rid = 0
        self._rid_lock = threading.Lock()
        self._pending: dict[int, tuple[threading.Event, list]] = {}
        self._pong_waiters: dict[float, tuple[threading.Event, list]] = {}
        self._closed = False
        try:
            self._conn = transport.connect(address, timeout=timeout)
        except OSError as exc:
            raise RegistryUnavailable(f"cannot reach registry at {address}: {exc}") from exc
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        ack = self._request(FrameKind.HELLO, {"node": endpoint.to_json()})
        if not ack.get("ok"):
            raise RegistryUnavailable(f"registry rejected hello: {ack}")
        self._pinger = threading.Thread(
            target=self._ping_loop, args=(ping_interval,), daemon=True
        )
        self._pinger.start()

    @property
    def alive(self) -> bool:
        return not self._closed

    def close(self) -> None:
        self._closed = True
        self._conn.close()

    # -- operations ----------------------------------------------------------

    def register(self, topic: str, role: str) -> list[Endpoint]:
        reply = self._request(FrameKind.SUB, {"topic": topic, "role": role})
        if not reply.get("ok"):
            if reply.get("error") == "invalid-topic":
                raise wire.InvalidTopic(reply.get("detail", topic))
            raise RegistryUnavailable(f"register failed: {reply}")
        return [Endpoint.from_json(e) for e in reply.get("peers", [])]

    def unregister(self, topic: str, role: str) -> None:
        reply = self._request(FrameKind.UNSUB, {"topic": topic, "role": role})
        if not reply.get("ok"):
            raise RegistryUnavailable(f"unregister failed: {reply}")

    def snapshot(self) -> RegistryTable:
        reply = self._request(FrameKind.STAT, {})
        if not reply.get("ok"):
            raise RegistryUnavailable(f"snapshot failed: {reply}")
        return table_from_json(reply["table"])

    def ping(self) -> float:
        """Round-trip one PING; returns seconds elapsed."""
        token = time.monotonic()
        event = threading.Event()
        slot: list = []
        self._pong_waiters[token] = (event, slot)
        try:
            self._send(FrameKind.PING, {"t": token})
            if not event.wait(self._timeout):
                raise RegistryUnavailable("ping timed out")
        finally:
            self._pong_waiters.pop(token, None)
        return time.monotonic() - token

    # -- plumbing -------------------------------------------------------------

    def _next_rid(self) -> int:
        with self._rid_lock:
            self._rid += 1
            return self._rid

    def _send(self, kind: FrameKind, obj: dict) -> None:
        try:
            self._conn.send_json(kind, obj)
        except ConnectionClosed as exc:
            raise RegistryUnavailable(str(exc)) from exc

    def _request(self, kind: FrameKind, obj: dict) -> dict:
        rid = self._next_rid()
        obj = dict(obj, rid=rid)
        event = threading.Event()
        slot: list = []
        self._pending[rid] = (event, slot)
        try:
            self._send(kind, obj)
            if not event.wait(self._timeout):
                raise RegistryUnavailable(f"registry request timed out ({kind.name})")
        finally:
            self._pending.pop(rid, None)
        return slot[0]

    def _read_loop(self) -> None:
        try:
            while True:
                kind, body = self._conn.recv()
                if kind is FrameKind.PONG:
                    msg = parse_json_body(body)
                    waiter = self._pong_waiters.get(msg.get("t"))
                    if waiter:
                        waiter[1].append(msg)
                        waiter[0].set()
                    continue
                msg = parse_json_body(body)
                rid = msg.get("re")
                if rid is not None:
                    waiter = self._pending.get(rid)
                    if waiter:
                        waiter[1].append(msg)
                        waiter[0].set()
                    continue
                if msg.get("event") and self._on_event:
                    try:
                        self._on_event(msg)
                    except Exception:
                        log.exception("registry event handler failed")
        except (ConnectionClosed, wire.CodecError, OSError):
            pass
        finally:
            self._closed = True
            for event, slot in list(self._pending.values()):
                slot.append({"ok": False, "error": "connection-lost"})
                event.set()

    def _ping_loop(self, interval: float) -> None:
        while not self._closed:
            time.sleep(interval)
            if self._closed:
                return
            try:
                self._conn.send_json(FrameKind.PING, {"t": -1.0})
            except ConnectionClosed:
                return
