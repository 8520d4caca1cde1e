"""Immutable PIR database matrix and its on-disk format."""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PIRDB\x01"
_HEADER = struct.Struct("<BBIIB")


class Kind(enum.IntEnum):
    ADDRESS = 0
    MERKLE = 1
    TRANSACTION = 2

    @property
    def slug(self) -> str:
        return {0: "address", 1: "merkle", 2: "transaction"}[self.value]

    @property
    def item_unit(self) -> int:
        return {0: 62, 1: 32, 2: 1}[self.value]

    @classmethod
    def from_slug(cls, s: str) -> "Kind":
        return {k.slug: k for k in cls}[s]


class Period(enum.IntEnum):
    WEEKLY = 0
    MONTHLY = 1
    ALLTIME = 2

    @property
    def slug(self) -> str:
        return {0: "weekly", 1: "monthly", 2: "alltime"}[self.value]

    @classmethod
    def from_slug(cls, s: str) -> "Period":
        return {p.slug: p for p in cls}[s]


class DatabaseFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PirDatabase:
    kind: Kind
    period: Period
    matrix: np.ndarray  # num_rows x row_width, uint8, read-only
    item_unit: int

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(self.matrix, dtype=np.uint8)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise DatabaseFormatError(f"bad matrix shape {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_payload(cls, kind, period, payload: bytes, num_rows: int, row_width: int,
                     item_unit: int | None = None) -> "PirDatabase":
        if len(payload) != num_rows * row_width:
            raise DatabaseFormatError(
                f"payload is {len(payload)} bytes, expected {num_rows} x {row_width}"
            )
        m = np.frombuffer(payload, dtype=np.uint8).reshape(num_rows, row_width)
        kind = Kind(kind)
        return cls(kind, Period(period), m, item_unit or kind.item_unit)

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_width(self) -> int:
        return self.matrix.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    @property
    def payload(self) -> bytes:
        return self.matrix.tobytes()

    def row(self, i: int) -> bytes:
        return self.matrix[i].tobytes()

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def to_bytes(self) -> bytes:
        head = MAGIC + _HEADER.pack(
            self.kind, self.period, self.row_width, self.num_rows, self.item_unit
        )
        return head + self.payload

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PirDatabase":
        if not raw.startswith(MAGIC):
            raise DatabaseFormatError("missing PIRDB magic")
        off = len(MAGIC)
        kind, period, width, rows, unit = _HEADER.unpack_from(raw, off)
        body = raw[off + _HEADER.size :]
        return cls.from_payload(kind, period, body, rows, width, unit)

    def save(self, path: Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> "PirDatabase":
        return cls.from_bytes(Path(path).read_bytes())

    def filename(self) -> str:
        return f"{self.kind.slug}-{self.period.slug}.pirdb"
