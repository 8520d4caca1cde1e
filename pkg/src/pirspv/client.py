"""PIR-SPV client: three private rounds (address, Merkle, transaction) then SPV.

A :class:`ClientSession` holds one connection per server, the downloaded
manifests and headers, and byte/latency counters.  IT-PIR queries fan out
to every live server in parallel; a server that stops answering is dropped
and decoding continues from the remaining shares.
"""
from __future__ import annotations

import json
import logging
import random
import socket
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import cpir
from .base58 import decode_address
from .builder import ENTRY_SIZE, AddressEntry
from .chain import BlockHeader, ChainError, Transaction, spv_verify, validate_header_chain
from .database import Kind, Period
from .field import FieldError
from .itpir import ItPirResponse, PirParams, itpir_decode, itpir_gen_queries
from .manifest import Manifest, ManifestRecord, rect_bytes
from .pir import ByteCounter, fetch_rows
from .wire import (
    RESPONSE_BIT,
    Backend,
    MsgType,
    ServerError,
    SessionStats,
    WireError,
    db_request,
    encode_frame,
    parse_error,
    pir_query_payload,
    read_frame,
)

log = logging.getLogger(__name__)

PERIOD_ORDER = (Period.WEEKLY, Period.MONTHLY, Period.ALLTIME)
ROUNDS = ("address", "merkle", "transaction")


class ClientError(RuntimeError):
    pass


class NotFound(ClientError):
    pass


class IntegrityError(ClientError):
    """Fetched bytes do not hash to the key they were requested under."""


class Connection(Protocol):
    stats: SessionStats

    def request(self, msg_type: int, payload: bytes) -> bytes: ...

    def close(self) -> None: ...


class TcpConnection:
    def __init__(self, host: str, port: int, timeout: float | None = 30.0):
        self.address = (host, port)
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.stats = SessionStats()

    def request(self, msg_type: int, payload: bytes) -> bytes:
        self.sock.sendall(encode_frame(msg_type, payload))
        self.stats.add_request("sent", msg_type, len(payload))
        resp_type, resp = read_frame(self.sock, max_frame=1 << 32)
        self.stats.add_response("received", msg_type, len(resp))
        if resp_type == MsgType.ERROR:
            raise parse_error(resp)
        if resp_type != msg_type | RESPONSE_BIT:
            raise WireError(f"unexpected response type {resp_type:#04x}")
        return resp

    def close(self) -> None:
        self.sock.close()


class LoopbackConnection:
    """Calls a :class:`~pirspv.server.PirService` in-process, counting bytes as TCP would."""

    def __init__(self, service):
        self.service = service
        self.server_stats = service.new_session()
        self.stats = SessionStats()
        self.alive = True

    def request(self, msg_type: int, payload: bytes) -> bytes:
        if not self.alive:
            raise WireError("connection closed")
        self.stats.add_request("sent", msg_type, len(payload))
        self.server_stats.add_request("received", msg_type, len(payload))
        resp_type, resp = self.service.handle(msg_type, payload)
        self.server_stats.add_response("sent", msg_type, len(resp))
        self.stats.add_response("received", msg_type, len(resp))
        if resp_type == MsgType.ERROR:
            raise parse_error(resp)
        return resp

    def close(self) -> None:
        self.alive = False


def connect(endpoints: Sequence[str]) -> list[TcpConnection]:
    conns = []
    for ep in endpoints:
        host, _, port = ep.rpartition(":")
        conns.append(TcpConnection(host or "127.0.0.1", int(port)))
    return conns


@dataclass
class RoundStats:
    bytes: int = 0
    seconds: float = 0.0
    rows: int = 0


@dataclass
class SpvResult:
    address: str
    period: Period
    entry: AddressEntry | None
    tx_bytes: bytes = b""
    txids: list[bytes] = field(default_factory=list)
    verified: bool = False
    reason: str = ""
    rounds: dict[str, RoundStats] = field(default_factory=dict)

    @property
    def block_height(self) -> int | None:
        return self.entry.block_height if self.entry else None

    @property
    def bandwidth_bytes(self) -> int:
        return sum(r.bytes for r in self.rounds.values())

    @property
    def latency_seconds(self) -> float:
        return sum(r.seconds for r in self.rounds.values())


# (kind, period, row index, decoded row bytes) -> row bytes; fault injection for tests
RowTamper = Callable[[Kind, Period, int, bytes], bytes]


class ClientSession:
    """State for one client talking to one or more PIR servers."""

    def __init__(
        self,
        connections: Sequence[Connection],
        params: PirParams | None = None,
        backend: str = "itpir",
        seed: int | None = None,
        security_bits: int = cpir.DEFAULT_SECURITY_BITS,
        row_tamper: RowTamper | None = None,
    ):
        self.connections = list(connections)
        if backend == "auto":
            # hybrid dispatch: one server means C-PIR, several mean IT-PIR
            backend = "cpir" if len(self.connections) == 1 else "itpir"
        if backend not in ("itpir", "cpir", "naive"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        if params is None:
            params = PirParams(ell=len(self.connections), t=min(1, len(self.connections) - 1),
                               k=len(self.connections))
        self.params = params
        if backend == "itpir":
            if len(self.connections) != params.ell:
                raise ValueError(f"{len(self.connections)} connections for ell={params.ell}")
            if len(self.connections) < params.t + 1:
                raise ValueError("IT-PIR needs at least t+1 servers")
        elif len(self.connections) != 1:
            raise ValueError(f"{backend} runs against exactly one server")
        self.live = [True] * len(self.connections)
        self._rng = np.random.default_rng(seed) if seed is not None else None
        self._py_rng = random.Random(seed)
        self.seed = seed
        self.security_bits = security_bits
        self._cpir_key: cpir.CpirKey | None = None
        self.row_tamper = row_tamper
        self.manifests: dict[tuple[Kind, Period], Manifest] = {}
        self.meta: dict[tuple[Kind, Period], dict] = {}
        self.headers: list[BlockHeader] = []
        self._full_db: dict[tuple[Kind, Period], bytes] = {}
        self._pool = ThreadPoolExecutor(max_workers=max(1, len(self.connections)))
        self._lock = threading.Lock()
        self._rows = 0

    # --- setup -------------------------------------------------------------

    def initialize(self) -> "ClientSession":
        self.sync_headers()
        self.fetch_manifests()
        return self

    def _first_live(self) -> Connection:
        for conn, ok in zip(self.connections, self.live):
            if ok:
                return conn
        raise ClientError("no reachable servers")

    def _call(self, fn):
        """Run ``fn`` against live servers in order until one answers."""
        last = None
        for i, conn in enumerate(self.connections):
            if not self.live[i]:
                continue
            try:
                return fn(conn)
            except (OSError, WireError) as exc:
                last = exc
                if not _is_server_error(exc):
                    self._mark_dead(i, exc)
                else:
                    raise
        raise ClientError(f"no reachable servers: {last}")

    def sync_headers(self) -> list[BlockHeader]:
        raw = self._call(lambda c: c.request(MsgType.GET_HEADERS, struct.pack("<I", 0)))
        if len(raw) % 80:
            raise ChainError("header stream is not a multiple of 80 bytes")
        headers = [BlockHeader.parse(raw[i : i + 80]) for i in range(0, len(raw), 80)]
        verdict = validate_header_chain(headers)
        if not verdict:
            raise ChainError(f"invalid header chain: {verdict.reason}")
        self.headers = headers
        return headers

    def fetch_manifests(self) -> None:
        for kind in Kind:
            for period in Period:
                req = db_request(kind, period)
                raw = self._call(lambda c: c.request(MsgType.GET_MANIFEST, req))
                self.manifests[(kind, period)] = Manifest.from_json(kind, period, raw)
                metas = []
                for i, conn in enumerate(self.connections):
                    if not self.live[i]:
                        continue
                    try:
                        metas.append((i, json.loads(conn.request(MsgType.GET_DB_META, req))))
                    except (OSError, WireError) as exc:
                        self._mark_dead(i, exc)
                if not metas:
                    raise ClientError("no reachable servers")
                for i, meta in metas:
                    if self.backend == "itpir" and meta["alpha"] != self.params.alphas[i]:
                        raise ClientError(
                            f"server {i} evaluates at {meta['alpha']}, expected {self.params.alphas[i]}"
                        )
                    if (meta["num_rows"], meta["row_width"]) != (metas[0][1]["num_rows"], metas[0][1]["row_width"]):
                        raise ClientError(f"server {i} disagrees on the shape of {kind.slug}-{period.slug}")
                self.meta[(kind, period)] = metas[0][1]

    def _mark_dead(self, i: int, exc: Exception) -> None:
        if self.live[i]:
            log.warning("dropping server %d: %s", i, exc)
        self.live[i] = False

    def shape(self, kind: Kind, period: Period) -> tuple[int, int]:
        m = self.meta[(kind, period)]
        return m["num_rows"], m["row_width"]

    # --- row fetching ------------------------------------------------------

    def backend_for(self, kind: Kind, period: Period) -> "_SessionRows":
        return _SessionRows(self, kind, period)

    def fetch_row(self, kind: Kind, period: Period, row: int) -> bytes:
        if self.backend == "itpir":
            data = self._itpir_row(kind, period, row)
        elif self.backend == "cpir":
            data = self._cpir_row(kind, period, row)
        else:
            data = self._naive_row(kind, period, row)
        if self.row_tamper is not None:
            data = self.row_tamper(kind, period, row, data)
        return data

    def _itpir_row(self, kind: Kind, period: Period, row: int) -> bytes:
        shape = self.shape(kind, period)
        with self._lock:
            queries = itpir_gen_queries(row, shape, self.params, self._rng)

        def ask(i: int):
            payload = pir_query_payload(kind, period, Backend.ITPIR, queries[i].to_bytes())
            return self.connections[i].request(MsgType.PIR_QUERY, payload)

        live = [i for i, ok in enumerate(self.live) if ok]
        futures = {i: self._pool.submit(ask, i) for i in live}
        responses = []
        for i, fut in futures.items():
            try:
                data = fut.result()
            except (OSError, WireError) as exc:
                if not _is_server_error(exc):
                    self._mark_dead(i, exc)
                else:
                    log.warning("server %d refused a query: %s", i, exc)
                continue
            if len(data) != shape[1]:
                log.warning("server %d answered %d bytes, expected %d", i, len(data), shape[1])
                continue
            responses.append(ItPirResponse(i, np.frombuffer(data, dtype=np.uint8)))
        try:
            return itpir_decode(responses, self.params)
        except FieldError as exc:
            raise ClientError(f"cannot decode row {row} of {kind.slug}-{period.slug}: {exc}") from exc

    def _cpir_row(self, kind: Kind, period: Period, row: int) -> bytes:
        if self._cpir_key is None:
            seed = self._py_rng.getrandbits(64) if self.seed is not None else None
            self._cpir_key = cpir.CpirKey.generate(self.security_bits, seed)
        seed = self._py_rng.getrandbits(64) if self.seed is not None else None
        query, state = cpir.cpir_gen_query(row, self.shape(kind, period), key=self._cpir_key, rng_seed=seed)
        payload = pir_query_payload(kind, period, Backend.CPIR, query.blob)
        resp = self._first_live().request(MsgType.PIR_QUERY, payload)
        return cpir.cpir_decode(cpir.CpirResponse(resp), state)

    def _naive_row(self, kind: Kind, period: Period, row: int) -> bytes:
        key = (kind, period)
        if key not in self._full_db:
            self._full_db[key] = self._first_live().request(MsgType.GET_FULL_DB, db_request(kind, period))
        width = self.shape(kind, period)[1]
        return self._full_db[key][row * width : (row + 1) * width]

    def fetch_record(self, kind: Kind, period: Period, rec: ManifestRecord) -> bytes:
        rows = fetch_rows((rec.row_start, rec.row_end), self.backend_for(kind, period))
        unit = self.meta[(kind, period)]["item_unit"]
        return rect_bytes(rows, rec.rect, self.shape(kind, period)[1], unit)

    # --- accounting --------------------------------------------------------

    def pir_traffic(self, overhead: bool = False) -> tuple[int, int]:
        """(uploaded, downloaded) row-fetch bytes summed over every server."""
        msg = MsgType.GET_FULL_DB if self.backend == "naive" else MsgType.PIR_QUERY
        sent = sum(c.stats.total("sent", msg, overhead) for c in self.connections)
        received = sum(c.stats.total("received", msg, overhead) for c in self.connections)
        return sent, received

    def pir_bytes(self, overhead: bool = False) -> int:
        return sum(self.pir_traffic(overhead))

    def header_bytes(self) -> int:
        return sum(c.stats.total("received", MsgType.GET_HEADERS, True) for c in self.connections)

    def close(self) -> None:
        self._pool.shutdown(wait=False)
        for c in self.connections:
            try:
                c.close()
            except OSError:
                pass

    def __enter__(self) -> "ClientSession":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # --- protocol rounds ---------------------------------------------------

    def _timed(self, name: str, stats: dict[str, RoundStats], fn):
        before = self.pir_bytes()
        rows_before = self._rows
        t0 = time.perf_counter()
        try:
            return fn()
        finally:
            rs = stats.setdefault(name, RoundStats())
            rs.seconds += time.perf_counter() - t0
            rs.bytes += self.pir_bytes() - before
            rs.rows += self._rows - rows_before

    def query_address(self, address: str, period: Period) -> list[AddressEntry]:
        rec = self.manifests[(Kind.ADDRESS, period)].lookup(address)
        if rec is None:
            return []
        blob = self.fetch_record(Kind.ADDRESS, period, rec)
        self._rows += rec.n_rows
        entries = [AddressEntry.parse(blob[i : i + ENTRY_SIZE]) for i in range(0, len(blob), ENTRY_SIZE)]
        return [e for e in entries if e.address == address]

    def query_merkle(self, height: int, period: Period) -> list[bytes]:
        rec = self.manifests[(Kind.MERKLE, period)].lookup(str(height))
        if rec is None:
            raise NotFound(f"block {height} not in the {period.slug} Merkle database")
        blob = self.fetch_record(Kind.MERKLE, period, rec)
        self._rows += rec.n_rows
        return [blob[i : i + 32] for i in range(0, len(blob), 32)]

    def query_transaction(self, txid: bytes, period: Period) -> bytes:
        rec = self.manifests[(Kind.TRANSACTION, period)].lookup(txid.hex())
        if rec is None:
            raise NotFound(f"transaction {txid.hex()} not in the {period.slug} database")
        blob = self.fetch_record(Kind.TRANSACTION, period, rec)
        self._rows += rec.n_rows
        try:
            tx = Transaction.parse(blob)
        except ChainError as exc:
            raise IntegrityError(f"fetched bytes for {txid.hex()} do not parse: {exc}") from None
        if tx.txid != txid:
            raise IntegrityError(f"fetched transaction hashes to {tx.txid.hex()}, expected {txid.hex()}")
        return blob

    def pir_spv(self, address: str, min_confirmations: int = 6) -> list[SpvResult]:
        """Privately fetch and SPV-check every UTXO of ``address``.

        Every period whose manifest lists the address is queried.  One bad
        entry yields a failed result without stopping the others.
        """
        hash160 = decode_address(address)
        results: list[SpvResult] = []
        for period in PERIOD_ORDER:
            if self.manifests[(Kind.ADDRESS, period)].lookup(address) is None:
                continue
            addr_stats: dict[str, RoundStats] = {}
            try:
                entries = self._timed("address", addr_stats, lambda: self.query_address(address, period))
            except ClientError as exc:
                results.append(SpvResult(address, period, None, reason=f"address round: {exc}",
                                         rounds=addr_stats))
                continue
            for n, entry in enumerate(entries):
                # the address round is shared; charge it to the first entry only
                rounds = dict(addr_stats) if n == 0 else {"address": RoundStats()}
                results.append(self._verify_entry(address, hash160, period, entry, rounds, min_confirmations))
        return results

    def _verify_entry(self, address, hash160, period, entry, rounds, min_confirmations) -> SpvResult:
        res = SpvResult(address, period, entry, rounds=rounds)
        try:
            res.txids = self._timed("merkle", rounds, lambda: self.query_merkle(entry.block_height, period))
            res.tx_bytes = self._timed("transaction", rounds, lambda: self.query_transaction(entry.txid, period))
        except ClientError as exc:
            res.reason = str(exc)
            return res
        tx = Transaction.parse(res.tx_bytes)
        if entry.vout_index >= len(tx.outputs) or tx.outputs[entry.vout_index].hash160 != hash160:
            res.reason = "output does not pay the queried address"
            return res
        verdict = spv_verify(tx, res.txids, self.headers, entry.block_height, min_confirmations)
        res.verified = verdict.ok
        res.reason = verdict.reason
        return res


class _SessionRows:
    """Adapts a session to the ``RowBackend`` surface used by ``fetch_rows``."""

    def __init__(self, session: ClientSession, kind: Kind, period: Period):
        self.session = session
        self.kind = kind
        self.period = period
        self.counter = ByteCounter()

    @property
    def shape(self) -> tuple[int, int]:
        return self.session.shape(self.kind, self.period)

    def fetch_row(self, row: int) -> bytes:
        sent0, recv0 = self.session.pir_traffic()
        data = self.session.fetch_row(self.kind, self.period, row)
        sent1, recv1 = self.session.pir_traffic()
        self.counter.sent += sent1 - sent0
        self.counter.received += recv1 - recv0
        self.counter.rows += 1
        return data


def _is_server_error(exc: Exception) -> bool:
    return isinstance(exc, ServerError)
