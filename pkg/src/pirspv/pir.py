"""Backend contract shared by IT-PIR, C-PIR and full download.

A backend fetches one database row at a time and counts the payload bytes
it moved.  ``fetch_rows`` is the multi-row path every protocol round uses.
The ``Local*`` classes talk to in-memory databases; the network client in
:mod:`pirspv.client` provides the same surface over sockets.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import cpir
from .database import PirDatabase
from .itpir import (
    ItPirResponse,
    PirParams,
    itpir_compute,
    itpir_decode,
    itpir_gen_queries,
)


@dataclass
class ByteCounter:
    """Client-side payload bytes: ``sent`` uploads, ``received`` downloads."""

    sent: int = 0
    received: int = 0
    rows: int = 0

    @property
    def total(self) -> int:
        return self.sent + self.received

    def reset(self) -> None:
        self.sent = self.received = self.rows = 0


class RowBackend(Protocol):
    counter: ByteCounter

    @property
    def shape(self) -> tuple[int, int]: ...

    def fetch_row(self, row: int) -> bytes: ...


def trivial_fetch(db: PirDatabase, counter: ByteCounter | None = None) -> bytes:
    payload = db.payload
    if counter is not None:
        counter.received += len(payload)
    return payload


def fetch_rows(row_range: tuple[int, int], backend: RowBackend) -> bytes:
    """Fetch rows ``start..end`` inclusive, one private query per row."""
    start, end = row_range
    num_rows = backend.shape[0]
    if not 0 <= start <= end < num_rows:
        raise ValueError(f"row range {row_range} outside 0..{num_rows - 1}")
    return b"".join(backend.fetch_row(r) for r in range(start, end + 1))


# Hook signature: (server_index, response) -> response, used to inject faults.
FaultHook = Callable[[int, ItPirResponse], ItPirResponse | None]


@dataclass
class LocalItPir:
    """IT-PIR against ``ell`` in-process replicas of one database."""

    db: PirDatabase
    params: PirParams
    seed: int | None = None
    fault: FaultHook | None = None
    counter: ByteCounter = field(default_factory=ByteCounter)

    def __post_init__(self) -> None:
        self._rng = np.random.default_rng(self.seed) if self.seed is not None else None

    @property
    def shape(self) -> tuple[int, int]:
        return self.db.shape

    def fetch_row(self, row: int) -> bytes:
        queries = itpir_gen_queries(row, self.db.shape, self.params, self._rng)
        responses = []
        for q in queries:
            self.counter.sent += q.shares.size
            resp = itpir_compute(q, self.db)
            if self.fault is not None:
                resp = self.fault(q.server_index, resp)
                if resp is None:
                    continue
            self.counter.received += resp.data.size
            responses.append(resp)
        self.counter.rows += 1
        return itpir_decode(responses, self.params)


@dataclass
class LocalCpir:
    db: PirDatabase
    key: cpir.CpirKey
    seed: int | None = None
    counter: ByteCounter = field(default_factory=ByteCounter)

    def __post_init__(self) -> None:
        self._rand = random.Random(self.seed)

    @property
    def shape(self) -> tuple[int, int]:
        return self.db.shape

    def fetch_row(self, row: int) -> bytes:
        seed = self._rand.getrandbits(64) if self.seed is not None else None
        query, state = cpir.cpir_gen_query(row, self.db.shape, self.key.bits, seed, key=self.key)
        resp = cpir.cpir_compute(query, self.db)
        self.counter.sent += query.size
        self.counter.received += resp.size
        self.counter.rows += 1
        return cpir.cpir_decode(resp, state)


@dataclass
class LocalTrivial:
    """Download the whole database once and answer every row offline."""

    db: PirDatabase
    counter: ByteCounter = field(default_factory=ByteCounter)
    _cache: bytes | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.db.shape

    def fetch_row(self, row: int) -> bytes:
        if self._cache is None:
            self._cache = trivial_fetch(self.db, self.counter)
        w = self.db.row_width
        self.counter.rows += 1
        return self._cache[row * w : (row + 1) * w]


def corrupt_server(index: int, rng: random.Random) -> FaultHook:
    """Fault hook flipping random bytes in one server's answers."""

    def hook(server: int, resp: ItPirResponse) -> ItPirResponse:
        if server != index:
            return resp
        data = resp.data.copy()
        for col in range(data.size):
            data[col] ^= rng.randrange(1, 256)
        return ItPirResponse(resp.server_index, data)

    return hook


def drop_servers(indices: Sequence[int]) -> FaultHook:
    dropped = set(indices)

    def hook(server: int, resp: ItPirResponse) -> ItPirResponse | None:
        return None if server in dropped else resp

    return hook
