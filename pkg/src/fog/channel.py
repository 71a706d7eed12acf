"""Authenticated channel between the two bridge endpoints.

Both endpoints hold the same 32-byte deployment secret. The handshake is a
mutual challenge-response keyed by that secret over both random nonces:

    initiator -> HELLO {nonce_i}
    responder -> HELLO {nonce_r, mac = HMAC(secret, "resp" | nonce_i | nonce_r)}
    initiator -> CTRL  {mac = HMAC(secret, "init" | nonce_i | nonce_r)}

Session keys come from HKDF-SHA256(secret, salt=nonce_i|nonce_r), one key
per direction, so nonces never collide across directions. After the
handshake the stream switches to records:

    +--------------+---------------+----------------------+
    | len u32 BE   | counter u64 BE| ciphertext (AEAD)    |
    +--------------+---------------+----------------------+

Each record seals exactly one wire-codec frame with ChaCha20-Poly1305,
using the send counter as both nonce material and associated data. The
receive side requires counters to advance by exactly one; any regression
or gap aborts the connection (replay protection).
"""

from __future__ import annotations

import hmac
import json
import os
import socket
import struct
import threading
from hashlib import sha256
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from . import wire
from .transport import FrameConnection, parse_json_body
from .wire import FrameKind, MessageEnvelope

SECRET_LEN = 32
_MAC_INITIATOR = b"fog-channel-auth-initiator"
_MAC_RESPONDER = b"fog-channel-auth-responder"
_INFO_I2R = b"fog-channel i2r"
_INFO_R2I = b"fog-channel r2i"
_INFO_KEYID = b"fog-channel keyid"
_MAX_RECORD = wire.MAX_BODY_LEN + wire.HEADER_LEN + 64


class ChannelError(Exception):
    pass


class AuthMismatch(ChannelError):
    """Handshake MAC did not verify; the peer holds a different secret."""


class ReplayDetected(ChannelError):
    """Record counter regressed or skipped; connection must be dropped."""


class ChannelDown(ChannelError):
    """The channel connection is not established."""


def generate_secret() -> bytes:
    return os.urandom(SECRET_LEN)


def secret_id(secret: bytes) -> str:
    """Public identifier of a deployment secret (safe to persist/log)."""
    return sha256(b"fog-secret-id" + secret).hexdigest()[:16]


def _hkdf(secret: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=info).derive(secret)


def derive_session_keys(secret: bytes, nonce_i: bytes, nonce_r: bytes) -> tuple[bytes, bytes, str]:
    """Directional keys plus a shared key id, from (secret, nonces)."""
    salt = nonce_i + nonce_r
    key_i2r = _hkdf(secret, salt, _INFO_I2R, 32)
    key_r2i = _hkdf(secret, salt, _INFO_R2I, 32)
    key_id = _hkdf(secret, salt, _INFO_KEYID, 8).hex()
    return key_i2r, key_r2i, key_id


def _auth_mac(secret: bytes, label: bytes, nonce_i: bytes, nonce_r: bytes) -> bytes:
    return hmac.new(secret, label + nonce_i + nonce_r, sha256).digest()


class SecureChannel:
    """One authenticated session. send() is thread-safe; recv() single-reader."""

    def __init__(self, sock: socket.socket, send_key: bytes, recv_key: bytes, key_id: str, leftover: bytes = b""):
        self._sock = sock
        self._send_aead = ChaCha20Poly1305(send_key)
        self._recv_aead = ChaCha20Poly1305(recv_key)
        self.key_id = key_id
        self._send_counter = 0
        self._recv_counter = 0
        self._send_lock = threading.Lock()
        self._buf = bytearray(leftover)
        self._closed = False
        self.frames_sent: dict[int, int] = {}
        self.frames_received: dict[int, int] = {}
        self.data_bytes_out = 0
        self.data_bytes_in = 0

    # -- record layer -------------------------------------------------------

    def send(self, kind: FrameKind, body: "MessageEnvelope | bytes") -> None:
        frame = wire.encode_frame(kind, body)
        with self._send_lock:
            if self._closed:
                raise ChannelDown("send on closed channel")
            self._send_counter += 1
            counter = struct.pack(">Q", self._send_counter)
            nonce = bytes(4) + counter
            sealed = self._send_aead.encrypt(nonce, frame, counter)
            record = struct.pack(">I", 8 + len(sealed)) + counter + sealed
            try:
                self._sock.sendall(record)
            except OSError as exc:
                self._closed = True
                raise ChannelDown(str(exc)) from exc
            self.frames_sent[int(kind)] = self.frames_sent.get(int(kind), 0) + 1
            if kind is FrameKind.DATA and isinstance(body, MessageEnvelope):
                self.data_bytes_out += len(body.payload)

    def recv(self, timeout: Optional[float] = None) -> "tuple[FrameKind, MessageEnvelope | bytes]":
        record = self._read_record(timeout)
        counter_bytes, sealed = record[:8], record[8:]
        counter = struct.unpack(">Q", counter_bytes)[0]
        if counter != self._recv_counter + 1:
            self.close()
            raise ReplayDetected(
                f"record counter {counter} after {self._recv_counter} (replay or reorder)"
            )
        nonce = bytes(4) + counter_bytes
        try:
            frame = self._recv_aead.decrypt(nonce, sealed, counter_bytes)
        except InvalidTag as exc:
            self.close()
            raise AuthMismatch("record failed authentication") from exc
        self._recv_counter = counter
        kind, body, used = wire.decode_frame(frame)
        if used != len(frame):
            self.close()
            raise ChannelError("record carries trailing bytes")
        self.frames_received[int(kind)] = self.frames_received.get(int(kind), 0) + 1
        if kind is FrameKind.DATA:
            self.data_bytes_in += len(body.payload)
        return kind, body

    def _read_record(self, timeout: Optional[float]) -> bytes:
        while True:
            if len(self._buf) >= 4:
                length = struct.unpack(">I", self._buf[:4])[0]
                if length < 8 or length > _MAX_RECORD:
                    self.close()
                    raise ChannelError(f"bad record length {length}")
                if len(self._buf) >= 4 + length:
                    record = bytes(self._buf[4 : 4 + length])
                    del self._buf[: 4 + length]
                    return record
            self._sock.settimeout(timeout)
            try:
                chunk = self._sock.recv(65536)
            except socket.timeout:
                raise
            except OSError as exc:
                self._closed = True
                raise ChannelDown(str(exc)) from exc
            if not chunk:
                self._closed = True
                raise ChannelDown("peer closed channel")
            self._buf.extend(chunk)

    @property
    def closed(self) -> bool:
        return self._closed

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


def _check_secret(secret: bytes) -> bytes:
    if len(secret) != SECRET_LEN:
        raise ChannelError(f"deployment secret must be {SECRET_LEN} bytes")
    return secret


def _strip_connection(conn: FrameConnection) -> tuple[socket.socket, bytes]:
    return conn._sock, bytes(conn._buf)


def handshake_initiator(conn: FrameConnection, secret: bytes, timeout: float = 5.0) -> SecureChannel:
    _check_secret(secret)
    nonce_i = os.urandom(32)
    conn.send_json(FrameKind.HELLO, {"v": 1, "role": "initiator", "nonce": nonce_i.hex()})
    kind, body = conn.recv(timeout=timeout)
    if kind is not FrameKind.HELLO:
        raise AuthMismatch(f"expected responder HELLO, got {kind.name}")
    msg = parse_json_body(body)
    try:
        nonce_r = bytes.fromhex(msg["nonce"])
        their_mac = bytes.fromhex(msg["mac"])
    except (KeyError, ValueError) as exc:
        raise AuthMismatch("malformed responder HELLO") from exc
    if not hmac.compare_digest(their_mac, _auth_mac(secret, _MAC_RESPONDER, nonce_i, nonce_r)):
        conn.close()
        raise AuthMismatch("responder failed authentication")
    conn.send_json(
        FrameKind.CTRL,
        {"op": "auth", "mac": _auth_mac(secret, _MAC_INITIATOR, nonce_i, nonce_r).hex()},
    )
    key_i2r, key_r2i, key_id = derive_session_keys(secret, nonce_i, nonce_r)
    sock, leftover = _strip_connection(conn)
    return SecureChannel(sock, send_key=key_i2r, recv_key=key_r2i, key_id=key_id, leftover=leftover)


def handshake_responder(conn: FrameConnection, secret: bytes, timeout: float = 5.0) -> SecureChannel:
    _check_secret(secret)
    kind, body = conn.recv(timeout=timeout)
    if kind is not FrameKind.HELLO:
        raise AuthMismatch(f"expected initiator HELLO, got {kind.name}")
    msg = parse_json_body(body)
    try:
        nonce_i = bytes.fromhex(msg["nonce"])
    except (KeyError, ValueError) as exc:
        raise AuthMismatch("malformed initiator HELLO") from exc
    nonce_r = os.urandom(32)
    conn.send_json(
        FrameKind.HELLO,
        {
            "v": 1,
            "role": "responder",
            "nonce": nonce_r.hex(),
            "mac": _auth_mac(secret, _MAC_RESPONDER, nonce_i, nonce_r).hex(),
        },
    )
    kind, body = conn.recv(timeout=timeout)
    if kind is not FrameKind.CTRL:
        raise AuthMismatch(f"expected initiator auth, got {kind.name}")
    msg = parse_json_body(body)
    try:
        their_mac = bytes.fromhex(msg["mac"])
    except (KeyError, ValueError) as exc:
        raise AuthMismatch("malformed initiator auth") from exc
    if not hmac.compare_digest(their_mac, _auth_mac(secret, _MAC_INITIATOR, nonce_i, nonce_r)):
        conn.close()
        raise AuthMismatch("initiator failed authentication")
    key_i2r, key_r2i, key_id = derive_session_keys(secret, nonce_i, nonce_r)
    sock, leftover = _strip_connection(conn)
    return SecureChannel(sock, send_key=key_r2i, recv_key=key_i2r, key_id=key_id, leftover=leftover)


def control_body(obj: dict) -> bytes:
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")
