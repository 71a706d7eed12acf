"""Framed stream transport: blocking sockets carrying wire-codec frames.

Every connection in the system (node-registry, node-node, proxy channel,
instance control) is a TCP stream of frames. A FrameConnection serializes
concurrent senders with a lock and reassembles frames on receive; a Listener
accepts connections and hands each one to a handler thread, refusing
connections at accept time when its port is not in the security allowlist.
"""

from __future__ import annotations

import json
import os
import socket
import threading
from typing import Callable, Iterable, Optional

from . import wire
from .wire import FrameKind, MessageEnvelope

_RECV_CHUNK = 65_536


class ConnectionClosed(Exception):
    """The peer closed the stream (or it broke) mid-conversation."""


class FrameConnection:
    """One framed TCP stream. send() is thread-safe; recv() is single-reader."""

    def __init__(self, sock: socket.socket):
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # non-TCP stream (e.g. socketpair in tests)
        self._sock = sock
        self._send_lock = threading.Lock()
        self._buf = bytearray()
        self._closed = False

    @property
    def peer(self) -> str:
        try:
            host, port = self._sock.getpeername()[:2]
            return f"{host}:{port}"
        except OSError:
            return "?"

    def send(self, kind: FrameKind, body: "MessageEnvelope | bytes") -> None:
        frame = wire.encode_frame(kind, body)
        with self._send_lock:
            if self._closed:
                raise ConnectionClosed("send on closed connection")
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc

    def send_json(self, kind: FrameKind, obj: dict) -> None:
        self.send(kind, json.dumps(obj, separators=(",", ":")).encode("utf-8"))

    def recv(self, timeout: Optional[float] = None) -> "tuple[FrameKind, MessageEnvelope | bytes]":
        """Block until one whole frame arrives; raise ConnectionClosed on EOF.

        A socket timeout surfaces as socket.timeout so callers can poll.
        """
        while True:
            try:
                kind, body, used = wire.decode_frame(bytes(self._buf))
                del self._buf[:used]
                return kind, body
            except wire.NeedMoreBytes:
                pass
            self._sock.settimeout(timeout)
            try:
                chunk = self._sock.recv(_RECV_CHUNK)
            except socket.timeout:
                raise
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed")
            self._buf.extend(chunk)

    def close(self) -> None:
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


def parse_json_body(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise wire.MalformedBody(f"bad control body: {exc}") from exc
    if not isinstance(obj, dict):
        raise wire.MalformedBody("control body must be a JSON object")
    return obj


def connect(address: str, timeout: float = 5.0) -> FrameConnection:
    host, port = split_address(address)
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return FrameConnection(sock)


def split_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad address {address!r}, expected host:port")
    return host, int(port)


def parse_port_set(spec: str) -> set[int]:
    """Parse "8000-8031,9000" into a set of ports."""
    ports: set[int] = set()
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            ports.update(range(int(lo), int(hi) + 1))
        else:
            ports.add(int(part))
    return ports


def allowed_ports_from_env() -> Optional[set[int]]:
    spec = os.environ.get("FOG_ALLOWED_PORTS")
    return parse_port_set(spec) if spec else None


def port_range_from_env() -> Optional[tuple[int, int]]:
    spec = os.environ.get("FOG_PORT_RANGE")
    if not spec:
        return None
    lo, hi = spec.split("-", 1)
    return int(lo), int(hi)


class Listener:
    """Accept loop owning a listening socket.

    ``allowed_ports`` models the deployment security rules: when the bound
    port is not in the set, every connection is accepted and immediately
    closed (refused before any frame is exchanged).
    """

    def __init__(
        self,
        handler: Callable[[FrameConnection, str], None],
        host: str = "127.0.0.1",
        port: int = 0,
        port_range: Optional[tuple[int, int]] = None,
        allowed_ports: Optional[Iterable[int]] = None,
        name: str = "listener",
    ):
        self._handler = handler
        self._allowed = set(allowed_ports) if allowed_ports is not None else None
        self._sock = _bind(host, port, port_range)
        self._sock.listen(64)
        self.host = host
        self.port = self._sock.getsockname()[1]
        self.address = f"{host}:{self.port}"
        self._closing = False
        self._thread = threading.Thread(target=self._accept_loop, name=name, daemon=True)
        self._thread.start()

    @property
    def refused(self) -> bool:
        return self._allowed is not None and self.port not in self._allowed

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                sock, addr = self._sock.accept()
            except OSError:
                return
            if self.refused:
                try:
                    sock.close()
                finally:
                    continue
            conn = FrameConnection(sock)
            threading.Thread(
                target=self._handler,
                args=(conn, f"{addr[0]}:{addr[1]}"),
                name=f"{self._thread.name}-conn",
                daemon=True,
            ).start()

    def close(self) -> None:
        self._closing = True
        # shutdown() unblocks a thread waiting in accept(); close() alone
        # leaves the listener half-alive until the accept returns.
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self._sock.close()
        except OSError:
            pass


def _bind(host: str, port: int, port_range: Optional[tuple[int, int]]) -> socket.socket:
    if port == 0 and port_range is not None:
        lo, hi = port_range
        for candidate in range(lo, hi + 1):
            sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            try:
                sock.bind((host, candidate))
                return sock
            except OSError:
                sock.close()
        raise OSError(f"no free port in range {lo}-{hi}")
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    if port != 0:
        # Explicit ports must survive restart-after-crash. This host's
        # netstack keeps 4-tuples in TIME_WAIT for 60 s and only REUSEPORT
        # bypasses it.
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        if hasattr(socket, "SO_REUSEPORT"):
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEPORT, 1)
    sock.bind((host, port))
    return sock


def find_free_port(host: str = "127.0.0.1") -> int:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.bind((host, 0))
    port = sock.getsockname()[1]
    sock.close()
    return port
