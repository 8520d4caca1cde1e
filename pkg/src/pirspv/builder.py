"""Turn a chain into the nine PIR databases (3 kinds x 3 periods) and manifests."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .base58 import address_payload, payload_to_address
from .chain import Block, BlockHeader
from .database import Kind, Period, PirDatabase
from .manifest import Manifest, Rect, manifest_filename, manifest_from_location_index
from .synth import UtxoIndex, replay_utxos

WEEK_BLOCKS = 1008
MONTH_BLOCKS = 4032
ENTRY_SIZE = 62
TXID_SIZE = 32
HEADERS_FILE = "headers.bin"


class BuildError(ValueError):
    pass


@dataclass(frozen=True)
class PeriodPartition:
    alltime: list[Block]
    monthly: list[Block]
    weekly: list[Block]

    def blocks(self, period: Period) -> list[Block]:
        return {Period.WEEKLY: self.weekly, Period.MONTHLY: self.monthly,
                Period.ALLTIME: self.alltime}[period]


def partition_chain(blocks: Sequence[Block]) -> PeriodPartition:
    """Tip-anchored split: newest 1008 blocks, the 4032 before them, the rest."""
    if not blocks:
        raise BuildError("cannot partition an empty chain")
    n = len(blocks)
    w0 = max(0, n - WEEK_BLOCKS)
    m0 = max(0, w0 - MONTH_BLOCKS)
    return PeriodPartition(list(blocks[:m0]), list(blocks[m0:w0]), list(blocks[w0:]))


# --- address entries ---------------------------------------------------------


@dataclass(frozen=True, order=True)
class AddressEntry:
    address_payload: bytes
    block_height: int
    txid: bytes
    vout_index: int

    def serialize(self) -> bytes:
        return self.address_payload + self.txid + struct.pack(">IB", self.block_height, self.vout_index)

    @classmethod
    def parse(cls, raw: bytes) -> "AddressEntry":
        if len(raw) != ENTRY_SIZE:
            raise BuildError(f"address entry must be {ENTRY_SIZE} bytes")
        height, vout = struct.unpack(">IB", raw[57:62])
        return cls(bytes(raw[:25]), height, bytes(raw[25:57]), vout)

    @property
    def address(self) -> str:
        return payload_to_address(self.address_payload)


def extract_address_entries(blocks: Sequence[Block], utxos: UtxoIndex) -> list[AddressEntry]:
    """Entries for the unspent outputs created in ``blocks``.

    Sorted by address payload; an address's entries are height-ascending,
    then by (txid, vout).
    """
    heights = {b.height for b in blocks}
    entries = []
    for u in utxos:
        if u.height not in heights:
            continue
        if u.vout > 255:
            raise BuildError(f"vout {u.vout} does not fit the 1-byte entry field")
        entries.append(AddressEntry(address_payload(u.hash160), u.height, u.txid, u.vout))
    entries.sort()
    return entries


# --- dimensions --------------------------------------------------------------


def square_dimensions(n_entries: int, entry_bytes: int) -> tuple[int, int]:
    """Byte-square layout ``(row_width_bytes, num_rows)`` for ``n_entries`` cells.

    entries per row = ceil(sqrt(n_entries / entry_bytes)), and there are
    ``entry_bytes`` rows per entry column, so width in bytes equals height.
    """
    m = max(1, -(-n_entries // entry_bytes))
    per_row = math.isqrt(m - 1) + 1
    return per_row * entry_bytes, per_row * entry_bytes


def compute_dimensions(kind: Kind, period: Period, n_items: int,
                       item_stats: Sequence[int] | None = None) -> tuple[int, int]:
    """Return ``(row_width_bytes, num_rows)`` for a database.

    ``n_items`` counts entries (Address), TXIDs (Merkle) or payload bytes
    (Transaction).

    ``item_stats`` holds per-block TXID counts for the all-time Merkle
    database and per-transaction byte lengths for Transaction databases.
    """
    if n_items <= 0:
        raise BuildError("cannot dimension an empty database")
    kind, period = Kind(kind), Period(period)
    if kind == Kind.ADDRESS:
        return square_dimensions(n_items, ENTRY_SIZE)
    if kind == Kind.MERKLE:
        if period != Period.ALLTIME:
            return square_dimensions(n_items, TXID_SIZE)
        if not item_stats:
            raise BuildError("all-time Merkle dimensions need per-block TXID counts")
        avg = 0.0
        for i, count in enumerate(item_stats, 1):
            avg += (count - avg) / i
        per_row = max(1, math.ceil(avg))
        return per_row * TXID_SIZE, -(-n_items // per_row)
    if not item_stats:
        raise BuildError("transaction dimensions need transaction lengths")
    width = max(1, math.ceil(sum(item_stats) / len(item_stats)))
    return width, -(-n_items // width)


# --- packing -----------------------------------------------------------------


def build_database(
    kind: Kind,
    period: Period,
    items: Sequence[tuple[str, bytes]],
    dims: tuple[int, int],
) -> tuple[PirDatabase, list[tuple[str, Rect]]]:
    """Pack ``(key, blob)`` items row-major and report each key's rectangle.

    Blobs are whole multiples of the kind's item unit; columns in the
    returned rectangles count units.  Unused space stays zero.
    """
    kind = Kind(kind)
    unit = kind.item_unit
    width, rows = dims
    if width % unit:
        raise BuildError(f"row width {width} is not a multiple of the {unit}-byte item")
    per_row = width // unit
    buf = bytearray(width * rows)
    locations = []
    offset = 0
    for key, blob in items:
        if not blob or len(blob) % unit:
            raise BuildError(f"{key}: blob of {len(blob)} bytes is not whole {unit}-byte items")
        end = offset + len(blob)
        if end > len(buf):
            raise BuildError(f"capacity overflow: {rows} x {width} bytes cannot hold item {key}")
        buf[offset:end] = blob
        first, last = offset // unit, end // unit - 1
        locations.append((key, (first // per_row, last // per_row, first % per_row, last % per_row)))
        offset = end
    matrix = np.frombuffer(bytes(buf), dtype=np.uint8).reshape(rows, width)
    return PirDatabase(kind, Period(period), matrix, unit), locations


def _address_items(entries: Sequence[AddressEntry]) -> list[tuple[str, bytes]]:
    items: list[tuple[str, bytes]] = []
    cur_key, cur = None, []
    for e in entries:
        key = e.address
        if key != cur_key and cur:
            items.append((cur_key, b"".join(cur)))
            cur = []
        cur_key = key
        cur.append(e.serialize())
    if cur:
        items.append((cur_key, b"".join(cur)))
    return items


@dataclass
class BuildResult:
    databases: dict[tuple[Kind, Period], PirDatabase] = field(default_factory=dict)
    manifests: dict[tuple[Kind, Period], Manifest] = field(default_factory=dict)
    headers: list[BlockHeader] = field(default_factory=list)

    def save(self, data_dir: Path) -> None:
        data_dir = Path(data_dir)
        data_dir.mkdir(parents=True, exist_ok=True)
        for (kind, period), db in sorted(self.databases.items()):
            db.save(data_dir / db.filename())
            (data_dir / manifest_filename(kind, period)).write_bytes(
                self.manifests[(kind, period)].to_json()
            )
        (data_dir / HEADERS_FILE).write_bytes(b"".join(h.serialize() for h in self.headers))

    @classmethod
    def load(cls, data_dir: Path) -> "BuildResult":
        data_dir = Path(data_dir)
        out = cls()
        for kind in Kind:
            for period in Period:
                db = PirDatabase.load(data_dir / f"{kind.slug}-{period.slug}.pirdb")
                raw = (data_dir / manifest_filename(kind, period)).read_bytes()
                out.databases[(kind, period)] = db
                out.manifests[(kind, period)] = Manifest.from_json(kind, period, raw)
        raw = (data_dir / HEADERS_FILE).read_bytes()
        out.headers = [BlockHeader.parse(raw[i : i + 80]) for i in range(0, len(raw), 80)]
        return out


def _empty(kind: Kind, period: Period) -> tuple[PirDatabase, Manifest]:
    db, _ = build_database(kind, period, [], (kind.item_unit, 1))
    return db, Manifest(kind, period, {})


def build_period(blocks: Sequence[Block], period: Period, utxos: UtxoIndex,
                 ) -> dict[Kind, tuple[PirDatabase, Manifest]]:
    out = {}
    # Address DB
    entries = extract_address_entries(blocks, utxos)
    out[Kind.ADDRESS] = _pack(Kind.ADDRESS, period, _address_items(entries), len(entries))

    # Merkle DB: every block's TXIDs, ascending height
    merkle_items = [(str(b.height), b"".join(b.txids)) for b in blocks]
    n_txids = sum(len(b.txs) for b in blocks)
    out[Kind.MERKLE] = _pack(Kind.MERKLE, period, merkle_items, n_txids,
                             [len(b.txs) for b in blocks])

    # Transaction DB: transactions still holding an unspent output, chain order
    live = utxos.unspent_txids()
    tx_items = [(tx.txid.hex(), tx.serialize()) for b in blocks for tx in b.txs if tx.txid in live]
    lengths = [len(blob) for _, blob in tx_items]
    out[Kind.TRANSACTION] = _pack(Kind.TRANSACTION, period, tx_items, sum(lengths), lengths)
    return out


def _pack(kind, period, items, n_items, stats=None):
    if not items:
        return _empty(kind, period)
    dims = compute_dimensions(kind, period, n_items, stats)
    db, locations = build_database(kind, period, items, dims)
    return db, manifest_from_location_index(kind, period, locations)


def build_all(blocks: Sequence[Block], utxos: UtxoIndex | None = None) -> BuildResult:
    if utxos is None:
        utxos = replay_utxos(blocks)
    parts = partition_chain(blocks)
    result = BuildResult(headers=[b.header for b in blocks])
    for period in Period:
        for kind, (db, manifest) in build_period(parts.blocks(period), period, utxos).items():
            result.databases[(kind, period)] = db
            result.manifests[(kind, period)] = manifest
    return result
