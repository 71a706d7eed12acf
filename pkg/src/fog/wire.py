"""Wire format shared by every stream connection in the system.

Frame layout (all integers big-endian):

    +-------------+------------+-----------+--------------+--------------+
    | magic "FGRS"| version u8 | kind u8   | length u32   | body         |
    | 4 bytes     | = 1        |           | body size    | length bytes |
    +-------------+------------+-----------+--------------+--------------+

Total frame size is 10 + length bytes.

DATA bodies carry a serialized message envelope:

    topic_len u8 | topic | publisher_id 16B | seq u64 | timestamp_ns u64
    | origin u8 | trace_count u8 | {hop_len u8 | hop}* | payload

Every other kind carries an opaque control body (the protocol layers above
encode those as JSON, except the fixed-layout network stats record).
"""

from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, field

MAGIC = b"FGRS"
VERSION = 1
HEADER_LEN = 10

# Payload cap per envelope; larger sensor data must be chunked by applications.
MAX_PAYLOAD = 2**24 - 1
MAX_TOPIC_LEN = 255
MAX_TRACE_HOPS = 8
MAX_HOP_LEN = 255

# Worst-case envelope metadata: topic prefix + identity/seq/timestamp/origin
# fields + a full trace. Bounds the declared length a decoder will accept.
_MAX_ENVELOPE_OVERHEAD = (
    1 + MAX_TOPIC_LEN + 16 + 8 + 8 + 1 + 1 + MAX_TRACE_HOPS * (1 + MAX_HOP_LEN)
)
MAX_BODY_LEN = MAX_PAYLOAD + _MAX_ENVELOPE_OVERHEAD

_TOPIC_RE = re.compile(r"^(?:/[A-Za-z0-9_]+)+$")


class FrameKind(enum.IntEnum):
    DATA = 1
    SUB = 2
    UNSUB = 3
    PING = 4
    PONG = 5
    HELLO = 6
    STAT = 7
    CTRL = 8


class Origin(enum.IntEnum):
    EDGE = 0
    CLOUD = 1


class CodecError(Exception):
    """Base class for every encode/decode failure."""


class BadMagic(CodecError):
    pass


class UnsupportedVersion(CodecError):
    pass


class UnknownKind(CodecError):
    pass


class OversizeDeclared(CodecError):
    pass


class OversizePayload(CodecError):
    pass


class InvalidTopic(CodecError):
    pass


class InvalidTrace(CodecError):
    pass


class MalformedBody(CodecError):
    pass


class NeedMoreBytes(CodecError):
    """Input ends before the frame does.

    ``needed`` is the total byte count required: 10 until the header is
    readable, then 10 + declared body length.
    """

    def __init__(self, needed: int):
        super().__init__(f"need {needed} bytes")
        self.needed = needed


def validate_topic(topic: str) -> str:
    """Return ``topic`` if it is a well-formed topic name, else raise.

    Rules: nonempty, starts with '/', '/'-separated nonempty segments of
    [A-Za-z0-9_], at most 255 bytes.
    """
    if not isinstance(topic, str) or not _TOPIC_RE.match(topic):
        raise InvalidTopic(f"invalid topic name: {topic!r}")
    if len(topic.encode("utf-8")) > MAX_TOPIC_LEN:
        raise InvalidTopic(f"topic name longer than {MAX_TOPIC_LEN} bytes")
    return topic


@dataclass(frozen=True)
class MessageEnvelope:
    """One published message plus its routing metadata.

    ``seq`` is per-(publisher, topic) and assigned by the publishing node;
    ``trace`` holds one hop label per forwarding element and is only
    populated when tracing is enabled for the deployment.
    """

    topic: str
    publisher_id: bytes
    seq: int
    origin: Origin
    timestamp_ns: int = 0
    payload: bytes = b""
    trace: tuple[str, ...] = field(default=())

    def with_hop(self, label: str) -> "MessageEnvelope":
        """Copy of this envelope with ``label`` appended to the trace."""
        return MessageEnvelope(
            topic=self.topic,
            publisher_id=self.publisher_id,
            seq=self.seq,
            origin=self.origin,
            timestamp_ns=self.timestamp_ns,
            payload=self.payload,
            trace=self.trace + (label,),
        )


def _encode_envelope(env: MessageEnvelope) -> bytes:
    validate_topic(env.topic)
    topic_bytes = env.topic.encode("utf-8")
    if len(env.publisher_id) != 16:
        raise MalformedBody("publisher_id must be exactly 16 bytes")
    if len(env.payload) > MAX_PAYLOAD:
        raise OversizePayload(
            f"payload of {len(env.payload)} bytes exceeds the 16 MiB cap"
        )
    if len(env.trace) > MAX_TRACE_HOPS:
        raise InvalidTrace(f"trace longer than {MAX_TRACE_HOPS} hops")
    parts = [
        struct.pack("B", len(topic_bytes)),
        topic_bytes,
        bytes(env.publisher_id),
        struct.pack(">Q", env.seq),
        struct.pack(">Q", env.timestamp_ns),
        struct.pack("B", int(env.origin)),
        struct.pack("B", len(env.trace)),
    ]
    for hop in env.trace:
        hop_bytes = hop.encode("utf-8")
        if not 0 < len(hop_bytes) <= MAX_HOP_LEN:
            raise InvalidTrace(f"hop label out of bounds: {hop!r}")
        parts.append(struct.pack("B", len(hop_bytes)))
        parts.append(hop_bytes)
    parts.append(env.payload)
    return b"".join(parts)


def _decode_envelope(body: bytes) -> MessageEnvelope:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise MalformedBody(f"envelope truncated in {what}")
        chunk = body[pos : pos + n]
        pos += n
        return chunk

    topic_len = take(1, "topic length")[0]
    try:
        topic = take(topic_len, "topic").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedBody("topic is not valid UTF-8") from exc
    validate_topic(topic)
    publisher_id = take(16, "publisher id")
    seq = struct.unpack(">Q", take(8, "seq"))[0]
    timestamp_ns = struct.unpack(">Q", take(8, "timestamp"))[0]
    origin_byte = take(1, "origin")[0]
    try:
        origin = Origin(origin_byte)
    except ValueError as exc:
        raise MalformedBody(f"unknown origin byte {origin_byte}") from exc
    trace_count = take(1, "trace count")[0]
    if trace_count > MAX_TRACE_HOPS:
        raise MalformedBody(f"trace count {trace_count} exceeds {MAX_TRACE_HOPS}")
    hops = []
    for _ in range(trace_count):
        hop_len = take(1, "hop length")[0]
        if hop_len == 0:
            raise MalformedBody("empty hop label")
        try:
            hops.append(take(hop_len, "hop label").decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise MalformedBody("hop label is not valid UTF-8") from exc
    payload = body[pos:]
    if len(payload) > MAX_PAYLOAD:
        raise OversizePayload("decoded payload exceeds the 16 MiB cap")
    return MessageEnvelope(
        topic=topic,
        publisher_id=publisher_id,
        seq=seq,
        origin=origin,
        timestamp_ns=timestamp_ns,
        payload=payload,
        trace=tuple(hops),
    )


def encode_frame(kind: FrameKind, body: "MessageEnvelope | bytes") -> bytes:
    """Encode one frame.

    DATA frames take a MessageEnvelope; every other kind takes the raw
    control body. Raises OversizePayload / InvalidTopic / InvalidTrace for
    envelopes that violate their bounds.
    """
    kind = FrameKind(kind)
    if kind is FrameKind.DATA:
        if not isinstance(body, MessageEnvelope):
            raise MalformedBody("DATA frames require a MessageEnvelope")
        raw = _encode_envelope(body)
    else:
        if isinstance(body, MessageEnvelope):
            raise MalformedBody(f"{kind.name} frames take a control body")
        raw = bytes(body)
    if len(raw) > MAX_BODY_LEN:
        raise OversizeDeclared(f"body of {len(raw)} bytes exceeds frame bound")
    return MAGIC + struct.pack(">BBI", VERSION, kind, len(raw)) + raw


def decode_frame(data: bytes) -> "tuple[FrameKind, MessageEnvelope | bytes, int]":
    """Decode one frame from the start of ``data``.

    Returns (kind, envelope-or-control-body, bytes consumed). Raises
    NeedMoreBytes when ``data`` ends before the frame does, and a typed
    CodecError for anything that can never become a valid frame.
    """
    if len(data) < HEADER_LEN:
        if len(data) >= 4 and data[:4] != MAGIC:
            raise BadMagic(f"bad magic {bytes(data[:4])!r}")
        raise NeedMoreBytes(HEADER_LEN)
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r}")
    version = data[4]
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    try:
        kind = FrameKind(data[5])
    except ValueError as exc:
        raise UnknownKind(f"unknown frame kind {data[5]}") from exc
    length = struct.unpack(">I", data[6:10])[0]
    if length > MAX_BODY_LEN:
        raise OversizeDeclared(f"declared body of {length} bytes exceeds bound")
    total = HEADER_LEN + length
    if len(data) < total:
        raise NeedMoreBytes(total)
    body = bytes(data[HEADER_LEN:total])
    if kind is FrameKind.DATA:
        return kind, _decode_envelope(body), total
    return kind, body, total


def decode_stream(data: bytes) -> "tuple[list[tuple[FrameKind, MessageEnvelope | bytes]], int]":
    """Decode as many whole frames as ``data`` holds.

    Returns (frames, bytes consumed); the caller keeps the unconsumed tail.
    """
    frames = []
    pos = 0
    while True:
        try:
            kind, body, used = decode_frame(data[pos:])
        except NeedMoreBytes:
            return frames, pos
        frames.append((kind, body))
        pos += used
