"""Per-database manifests: key -> [row_start, row_end, col_start, col_end].

Columns count entries for Address and Merkle databases and bytes for the
Transaction database.  One JSON object per manifest, keys sorted, so equal
builds produce identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .database import Kind, Period, PirDatabase

Rect = tuple[int, int, int, int]


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestRecord:
    key: str
    row_start: int
    row_end: int
    col_start: int
    col_end: int

    def __post_init__(self) -> None:
        vals = (self.row_start, self.row_end, self.col_start, self.col_end)
        if any(not isinstance(v, int) or isinstance(v, bool) or v < 0 for v in vals):
            raise ManifestError(f"{self.key}: indices must be non-negative integers")
        if self.row_start > self.row_end or (
            self.row_start == self.row_end and self.col_start > self.col_end
        ):
            raise ManifestError(f"{self.key}: empty or inverted rectangle {vals}")

    @property
    def rect(self) -> Rect:
        return (self.row_start, self.row_end, self.col_start, self.col_end)

    @property
    def n_rows(self) -> int:
        return self.row_end - self.row_start + 1


@dataclass(frozen=True)
class Manifest:
    kind: Kind
    period: Period
    records: Mapping[str, Rect] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self, key: str) -> ManifestRecord | None:
        rect = self.records.get(key)
        if rect is None:
            return None
        return ManifestRecord(key, *rect)

    def __iter__(self):
        for key in sorted(self.records):
            yield ManifestRecord(key, *self.records[key])

    def to_json(self) -> bytes:
        body = {k: list(v) for k, v in self.records.items()}
        return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, kind: Kind, period: Period, raw: bytes) -> "Manifest":
        try:
            obj = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ManifestError(f"malformed manifest: {exc}") from None
        if not isinstance(obj, dict):
            raise ManifestError("manifest must be a JSON object")
        records = {}
        for key, val in obj.items():
            if not isinstance(val, list) or len(val) != 4:
                raise ManifestError(f"{key}: expected a 4-element array, got {val!r}")
            records[key] = ManifestRecord(key, *val).rect
        return cls(Kind(kind), Period(period), records)

    def filename(self) -> str:
        return manifest_filename(self.kind, self.period)

    def validate_against(self, db: PirDatabase) -> None:
        """Raise unless every rectangle fits inside ``db``."""
        cols = db.row_width // (db.item_unit if self.kind != Kind.TRANSACTION else 1)
        for rec in self:
            if rec.row_end >= db.num_rows or rec.col_start >= cols or rec.col_end >= cols:
                raise ManifestError(f"{rec.key}: {rec.rect} outside {db.num_rows} x {cols}")


def manifest_filename(kind: Kind, period: Period) -> str:
    return f"{Kind(kind).slug}-{Period(period).slug}.manifest.json"


def manifest_from_location_index(kind: Kind, period: Period, index) -> Manifest:
    """Build a manifest from ``(key, rect)`` pairs, rejecting duplicate keys."""
    items = index.items() if isinstance(index, Mapping) else index
    records: dict[str, Rect] = {}
    for key, rect in items:
        if key in records:
            raise ManifestError(f"duplicate manifest key {key!r}")
        records[key] = ManifestRecord(key, *rect).rect
    return Manifest(Kind(kind), Period(period), records)


def slice_rect(db: PirDatabase, rect: Rect, unit: int) -> bytes:
    """Bytes covered by ``rect`` when columns count ``unit``-byte cells."""
    rs, re, _, _ = rect
    rows = db.matrix[rs : re + 1].tobytes()
    return rect_bytes(rows, rect, db.row_width, unit)


def rect_bytes(rows: bytes, rect: Rect, row_width: int, unit: int) -> bytes:
    """Cut ``rect`` out of the concatenated rows ``row_start..row_end``."""
    rs, re, cs, ce = rect
    if len(rows) != (re - rs + 1) * row_width:
        raise ManifestError(f"expected {re - rs + 1} rows of {row_width} bytes, got {len(rows)}")
    return rows[cs * unit : (re - rs) * row_width + (ce + 1) * unit]
