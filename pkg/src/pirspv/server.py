"""PIR server: hosts the nine databases, their manifests and the header list."""
from __future__ import annotations

import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import cpir
from .builder import BuildResult
from .database import Kind, Period
from .itpir import ItPirQuery, ProtocolError, itpir_compute
from .wire import (
    DEFAULT_MAX_FRAME,
    RESPONSE_BIT,
    Backend,
    ErrorCode,
    FrameTooLarge,
    MsgType,
    SessionStats,
    WireError,
    encode_frame,
    error_payload,
    read_frame,
)

log = logging.getLogger(__name__)


class RequestError(Exception):
    def __init__(self, code: ErrorCode, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class ServerConfig:
    data_dir: Path | None = None
    host: str = "127.0.0.1"
    port: int = 0
    server_index: int = 0
    backends: frozenset[Backend] = frozenset({Backend.ITPIR, Backend.CPIR})
    max_frame: int = DEFAULT_MAX_FRAME

    @property
    def alpha(self) -> int:
        return self.server_index + 1


# (kind, period, backend, response bytes) -> response bytes; lets tests play a Byzantine server
ResponseTamper = Callable[[Kind, Period, Backend, bytes], bytes]


@dataclass
class PirService:
    """Request dispatch over an immutable build snapshot."""

    build: BuildResult
    config: ServerConfig = field(default_factory=ServerConfig)
    tamper: ResponseTamper | None = None

    def __post_init__(self) -> None:
        self._manifests = {key: m.to_json() for key, m in self.build.manifests.items()}
        self._headers = b"".join(h.serialize() for h in self.build.headers)
        self._lock = threading.Lock()
        self.sessions: list[SessionStats] = []
        self.sockets: set[socket.socket] = set()

    @classmethod
    def from_config(cls, config: ServerConfig) -> "PirService":
        return cls(BuildResult.load(config.data_dir), config)

    def new_session(self) -> SessionStats:
        stats = SessionStats()
        with self._lock:
            self.sessions.append(stats)
        return stats

    def _db_key(self, payload: bytes) -> tuple[Kind, Period]:
        if len(payload) < 2:
            raise RequestError(ErrorCode.BAD_REQUEST, "missing kind/period")
        try:
            return Kind(payload[0]), Period(payload[1])
        except ValueError:
            raise RequestError(ErrorCode.NOT_FOUND, f"no database {payload[0]}/{payload[1]}") from None

    def handle(self, msg_type: int, payload: bytes) -> tuple[int, bytes]:
        try:
            return msg_type | RESPONSE_BIT, self._dispatch(msg_type, payload)
        except RequestError as exc:
            return MsgType.ERROR, error_payload(exc.code, str(exc))
        except ProtocolError as exc:
            return MsgType.ERROR, error_payload(ErrorCode.PROTOCOL, str(exc))
        except Exception as exc:  # keep the connection usable
            log.exception("request %#x failed", msg_type)
            return MsgType.ERROR, error_payload(ErrorCode.INTERNAL, repr(exc))

    def _dispatch(self, msg_type: int, payload: bytes) -> bytes:
        if msg_type == MsgType.GET_MANIFEST:
            return self._manifests[self._db_key(payload)]
        if msg_type == MsgType.GET_HEADERS:
            if len(payload) != 4:
                raise RequestError(ErrorCode.BAD_REQUEST, "GET_HEADERS takes a u32 height")
            (start,) = struct.unpack("<I", payload)
            return self._headers[start * 80 :]
        if msg_type == MsgType.GET_DB_META:
            key = self._db_key(payload)
            db = self.build.databases[key]
            meta = {
                "kind": key[0].slug,
                "period": key[1].slug,
                "num_rows": db.num_rows,
                "row_width": db.row_width,
                "item_unit": db.item_unit,
                "server_index": self.config.server_index,
                "alpha": self.config.alpha,
                "backends": sorted(b.name.lower() for b in self.config.backends),
            }
            return json.dumps(meta, sort_keys=True).encode()
        if msg_type == MsgType.GET_FULL_DB:
            return self.build.databases[self._db_key(payload)].payload
        if msg_type == MsgType.PIR_QUERY:
            return self._pir(payload)
        raise RequestError(ErrorCode.UNKNOWN_TYPE, f"unknown message type {msg_type:#04x}")

    def _pir(self, payload: bytes) -> bytes:
        if len(payload) < 3:
            raise RequestError(ErrorCode.BAD_REQUEST, "PIR_QUERY header truncated")
        kind, period = self._db_key(payload)
        try:
            backend = Backend(payload[2])
        except ValueError:
            raise RequestError(ErrorCode.BAD_REQUEST, f"unknown backend {payload[2]}") from None
        if backend not in self.config.backends:
            raise RequestError(ErrorCode.DISABLED, f"backend {backend.name} disabled")
        db = self.build.databases[(kind, period)]
        blob = payload[3:]
        if backend == Backend.ITPIR:
            shares = np.frombuffer(blob, dtype=np.uint8)
            out = itpir_compute(ItPirQuery(self.config.server_index, shares), db).to_bytes()
        else:
            out = cpir.cpir_compute(cpir.CpirQuery(blob), db).blob
        if self.tamper is not None:
            out = self.tamper(kind, period, backend, out)
        return out


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        service: PirService = self.server.service  # type: ignore[attr-defined]
        stats = service.new_session()
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        service.sockets.add(sock)
        try:
            self._loop(service, stats, sock)
        finally:
            service.sockets.discard(sock)

    def _loop(self, service: PirService, stats: SessionStats, sock: socket.socket) -> None:
        while True:
            try:
                msg_type, payload = read_frame(sock, service.config.max_frame)
            except FrameTooLarge as exc:
                log.warning("closing connection: %s", exc)
                return
            except (WireError, OSError):
                return
            stats.add_request("received", msg_type, len(payload))
            resp_type, resp = service.handle(msg_type, payload)
            stats.add_response("sent", msg_type, len(resp))
            try:
                sock.sendall(encode_frame(resp_type, resp))
            except OSError:
                return


class PirTCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, service: PirService):
        self.service = service
        super().__init__((service.config.host, service.config.port), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def kill(self) -> None:
        """Stop accepting and drop every open connection, as a crash would."""
        self.shutdown()
        self.server_close()
        for sock in list(self.service.sockets):
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()


def start_background(service: PirService) -> PirTCPServer:
    """Start serving on a daemon thread; call ``shutdown()`` to stop."""
    server = PirTCPServer(service)
    threading.Thread(target=server.serve_forever, name="pir-server", daemon=True).start()
    return server


def serve(config: ServerConfig) -> None:
    service = PirService.from_config(config)
    with PirTCPServer(service) as server:
        host, port = server.address
        log.info("server %d (alpha %d) listening on %s:%d", config.server_index, config.alpha, host, port)
        server.serve_forever()
