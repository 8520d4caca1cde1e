"""Length-prefixed binary frames shared by the PIR server and client.

Frame: ``u32 LE payload length | u8 message type | payload``.  Responses
reuse the request type with the high bit set; ``0xFF`` carries an error
(``u8 code`` followed by a UTF-8 message).

Request payloads::

    GET_MANIFEST  u8 kind, u8 period
    GET_HEADERS   u32 LE from_height
    PIR_QUERY     u8 kind, u8 period, u8 backend, query blob
    GET_DB_META   u8 kind, u8 period            -> JSON object
    GET_FULL_DB   u8 kind, u8 period            -> raw payload
"""
from __future__ import annotations

import enum
import socket
import struct
from dataclasses import dataclass, field

FRAME_HEADER = struct.Struct("<IB")
HEADER_SIZE = FRAME_HEADER.size
DEFAULT_MAX_FRAME = 64 * 1024 * 1024
RESPONSE_BIT = 0x80


class MsgType(enum.IntEnum):
    GET_MANIFEST = 0x01
    GET_HEADERS = 0x02
    PIR_QUERY = 0x03
    GET_DB_META = 0x04
    GET_FULL_DB = 0x05
    ERROR = 0xFF


class Backend(enum.IntEnum):
    ITPIR = 0
    CPIR = 1


class ErrorCode(enum.IntEnum):
    UNKNOWN_TYPE = 1
    BAD_REQUEST = 2
    PROTOCOL = 3
    NOT_FOUND = 4
    DISABLED = 5
    INTERNAL = 6


class WireError(ConnectionError):
    pass


class FrameTooLarge(WireError):
    pass


class ServerError(WireError):
    """The peer answered with an error frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error {code}: {message}")
        self.code = code
        self.message = message


# Routing bytes in front of a request body; counted as overhead, not payload.
ROUTING_BYTES = {
    MsgType.GET_MANIFEST: 2,
    MsgType.GET_HEADERS: 4,
    MsgType.PIR_QUERY: 3,
    MsgType.GET_DB_META: 2,
    MsgType.GET_FULL_DB: 2,
}


def encode_frame(msg_type: int, payload: bytes) -> bytes:
    return FRAME_HEADER.pack(len(payload), msg_type) + payload


def error_payload(code: int, message: str) -> bytes:
    return bytes([code]) + message.encode()


def parse_error(payload: bytes) -> ServerError:
    if not payload:
        return ServerError(0, "empty error frame")
    return ServerError(payload[0], payload[1:].decode(errors="replace"))


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise WireError("connection closed mid-frame" if buf else "connection closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> tuple[int, bytes]:
    length, msg_type = FRAME_HEADER.unpack(recv_exact(sock, HEADER_SIZE))
    if length > max_frame:
        raise FrameTooLarge(f"frame of {length} bytes exceeds limit {max_frame}")
    return msg_type, recv_exact(sock, length)


def pir_query_payload(kind: int, period: int, backend: int, blob: bytes) -> bytes:
    return bytes([kind, period, backend]) + blob


def db_request(kind: int, period: int) -> bytes:
    return bytes([kind, period])


@dataclass
class Traffic:
    payload: int = 0
    overhead: int = 0

    @property
    def total(self) -> int:
        return self.payload + self.overhead


@dataclass
class SessionStats:
    """Per-connection byte counters keyed by request type.

    ``sent``/``received`` are from the owner's point of view.  Payload
    excludes frame headers and routing bytes so benchmarks can count or
    drop them separately.  Responses, error frames included, are filed
    under the type of the request they answer.
    """

    sent: dict[int, Traffic] = field(default_factory=dict)
    received: dict[int, Traffic] = field(default_factory=dict)

    @staticmethod
    def _bump(table: dict[int, Traffic], key: int, payload_len: int, routing: int) -> None:
        t = table.setdefault(key, Traffic())
        t.payload += payload_len - routing
        t.overhead += HEADER_SIZE + routing

    def add_request(self, direction: str, msg_type: int, payload_len: int) -> None:
        routing = min(ROUTING_BYTES.get(msg_type, 0), payload_len)
        self._bump(self._table(direction), msg_type, payload_len, routing)

    def add_response(self, direction: str, request_type: int, payload_len: int) -> None:
        self._bump(self._table(direction), request_type, payload_len, 0)

    def _table(self, direction: str) -> dict[int, Traffic]:
        return self.sent if direction == "sent" else self.received

    def total(self, direction: str, msg_type: int | None = None, overhead: bool = False) -> int:
        table = self._table(direction)
        items = [table.get(msg_type, Traffic())] if msg_type is not None else table.values()
        return sum(t.total if overhead else t.payload for t in items)

    def reset(self) -> None:
        self.sent.clear()
        self.received.clear()

    def as_dict(self) -> dict:
        def dump(table):
            return {
                MsgType(k).name if k in MsgType._value2member_map_ else str(k): {
                    "payload": v.payload,
                    "overhead": v.overhead,
                }
                for k, v in sorted(table.items())
            }

        return {"sent": dump(self.sent), "received": dump(self.received)}
