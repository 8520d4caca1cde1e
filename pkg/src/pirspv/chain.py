"""Bitcoin-shaped chain objects: headers, transactions, blocks, SPV checks.

Headers follow the real 80-byte layout.  Transactions use this package's
own canonical serialization (P2PKH only, no scripts)::

    u32 LE  input count
      32B   prev txid      (per input)
      u32 LE vout          (per input)
    u32 LE  output count
      u64 LE value         (per output)
      u8    20             (per output, address payload length)
      20B   hash160        (per output)

All integers are little-endian; hashes are stored in serialized byte order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable, Iterator, Sequence

from .base58 import decode_address, dsha256, encode_address

ZERO_HASH = b"\x00" * 32
HEADER_SIZE = 80
_HEADER = struct.Struct("<i32s32sIII")


class ChainError(ValueError):
    """Domain error for malformed chain data."""


@dataclass(frozen=True)
class Verdict:
    """Boolean outcome plus the reason it failed (empty when ok)."""

    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


# --- headers -----------------------------------------------------------------


@dataclass(frozen=True)
class BlockHeader:
    version: int
    prev_hash: bytes
    merkle_root: bytes
    time: int
    bits: int
    nonce: int

    def serialize(self) -> bytes:
        return _HEADER.pack(
            self.version, self.prev_hash, self.merkle_root, self.time, self.bits, self.nonce
        )

    @classmethod
    def parse(cls, raw: bytes) -> "BlockHeader":
        if len(raw) != HEADER_SIZE:
            raise ChainError(f"header must be {HEADER_SIZE} bytes, got {len(raw)}")
        return cls(*_HEADER.unpack(raw))

    def hash(self) -> bytes:
        return header_hash(self)


def header_hash(header: BlockHeader) -> bytes:
    return dsha256(header.serialize())


def bits_to_target(bits: int) -> int:
    """Expand a compact difficulty encoding.

    Targets wider than 256 bits are accepted and make the check vacuous.
    """
    if not 0 <= bits <= 0xFFFFFFFF:
        raise ChainError(f"bits out of range: {bits:#x}")
    exponent = bits >> 24
    mantissa = bits & 0x007FFFFF
    if bits & 0x00800000 and mantissa:
        raise ChainError(f"negative compact target {bits:#010x}")
    if exponent <= 3:
        return mantissa >> (8 * (3 - exponent))
    return mantissa << (8 * (exponent - 3))


def target_to_bits(target: int) -> int:
    size = (target.bit_length() + 7) // 8
    if size <= 3:
        mantissa = target << (8 * (3 - size))
    else:
        mantissa = target >> (8 * (size - 3))
    if mantissa & 0x00800000:
        mantissa >>= 8
        size += 1
    return (size << 24) | mantissa


def pow_check(header: BlockHeader) -> bool:
    target = bits_to_target(header.bits)
    return int.from_bytes(header_hash(header), "little") <= target


# --- transactions ------------------------------------------------------------


@dataclass(frozen=True)
class TxIn:
    prev_txid: bytes
    vout: int


@dataclass(frozen=True)
class TxOut:
    value: int
    hash160: bytes

    @property
    def address(self) -> str:
        return encode_address(self.hash160)


@dataclass(frozen=True)
class Transaction:
    inputs: tuple[TxIn, ...]
    outputs: tuple[TxOut, ...]

    @property
    def is_coinbase(self) -> bool:
        return len(self.inputs) == 1 and self.inputs[0].prev_txid == ZERO_HASH

    def serialize(self) -> bytes:
        parts = [struct.pack("<I", len(self.inputs))]
        for i in self.inputs:
            parts.append(i.prev_txid + struct.pack("<I", i.vout))
        parts.append(struct.pack("<I", len(self.outputs)))
        for o in self.outputs:
            parts.append(struct.pack("<QB", o.value, 20) + o.hash160)
        return b"".join(parts)

    @classmethod
    def parse(cls, raw: bytes) -> "Transaction":
        tx, used = cls.parse_prefix(raw)
        if used != len(raw):
            raise ChainError(f"{len(raw) - used} trailing bytes after transaction")
        return tx

    @classmethod
    def parse_prefix(cls, raw: bytes) -> tuple["Transaction", int]:
        """Parse one transaction from the start of ``raw``; return it and its length."""
        try:
            pos = 0
            (n_in,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if n_in > len(raw):
                raise ChainError("implausible input count")
            inputs = []
            for _ in range(n_in):
                txid = bytes(raw[pos : pos + 32])
                (vout,) = struct.unpack_from("<I", raw, pos + 32)
                if len(txid) != 32:
                    raise ChainError("truncated input")
                inputs.append(TxIn(txid, vout))
                pos += 36
            (n_out,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            if n_out > len(raw):
                raise ChainError("implausible output count")
            outputs = []
            for _ in range(n_out):
                value, plen = struct.unpack_from("<QB", raw, pos)
                if plen != 20:
                    raise ChainError(f"address payload length {plen} != 20")
                h160 = bytes(raw[pos + 9 : pos + 29])
                if len(h160) != 20:
                    raise ChainError("truncated output")
                outputs.append(TxOut(value, h160))
                pos += 29
        except struct.error as exc:
            raise ChainError(f"truncated transaction: {exc}") from None
        return cls(tuple(inputs), tuple(outputs)), pos

    @cached_property
    def txid(self) -> bytes:
        return txid(self)


def txid(tx: Transaction) -> bytes:
    return dsha256(tx.serialize())


def coinbase(height: int, value: int, hash160: bytes) -> Transaction:
    # vout carries the height so coinbases paying the same address stay distinct
    return Transaction((TxIn(ZERO_HASH, height),), (TxOut(value, hash160),))


# --- blocks and merkle trees -------------------------------------------------


def merkle_root(txids: Sequence[bytes]) -> bytes:
    if not txids:
        raise ChainError("merkle root of an empty list")
    level = list(txids)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [dsha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    txs: tuple[Transaction, ...]
    height: int

    @property
    def txids(self) -> list[bytes]:
        return [tx.txid for tx in self.txs]

    def serialize(self) -> bytes:
        return (
            self.header.serialize()
            + struct.pack("<I", len(self.txs))
            + b"".join(tx.serialize() for tx in self.txs)
        )

    def size(self) -> int:
        return len(self.serialize())


def validate_header_chain(headers: Sequence[BlockHeader]) -> Verdict:
    if not headers:
        return Verdict(False, "empty header list")
    if headers[0].prev_hash != ZERO_HASH:
        return Verdict(False, "first header is not a genesis header")
    prev = None
    for height, h in enumerate(headers):
        if prev is not None and h.prev_hash != prev:
            return Verdict(False, f"broken link at height {height}")
        try:
            if not pow_check(h):
                return Verdict(False, f"proof of work fails at height {height}")
        except ChainError as exc:
            return Verdict(False, f"bad bits at height {height}: {exc}")
        prev = header_hash(h)
    return Verdict(True)


def spv_verify(
    tx: Transaction,
    block_txids: Sequence[bytes],
    headers: Sequence[BlockHeader],
    height: int,
    min_confirmations: int,
) -> Verdict:
    """Inclusion + header + depth check.

    Confirmations count blocks mined on top of the containing block, so a
    transaction in the tip has zero.
    """
    if not 0 <= height < len(headers):
        return Verdict(False, f"height {height} outside header range")
    if txid(tx) not in block_txids:
        return Verdict(False, "txid not in block")
    if not block_txids or merkle_root(block_txids) != headers[height].merkle_root:
        return Verdict(False, "merkle root mismatch")
    confirmations = len(headers) - 1 - height
    if confirmations < min_confirmations:
        return Verdict(False, f"{confirmations} confirmations < {min_confirmations}")
    return Verdict(True)


def mine(header: BlockHeader, max_tries: int = 1 << 32) -> BlockHeader:
    target = bits_to_target(header.bits)
    raw = bytearray(header.serialize())
    for nonce in range(header.nonce, header.nonce + max_tries):
        struct.pack_into("<I", raw, 76, nonce & 0xFFFFFFFF)
        if int.from_bytes(dsha256(bytes(raw)), "little") <= target:
            return BlockHeader.parse(bytes(raw))
    raise ChainError("nonce space exhausted")


# --- JSON-lines interchange --------------------------------------------------


def block_to_json(block: Block) -> dict:
    h = block.header
    return {
        "height": block.height,
        "header": {
            "version": h.version,
            "prev_hash": h.prev_hash.hex(),
            "merkle_root": h.merkle_root.hex(),
            "time": h.time,
            "bits": f"{h.bits:08x}",
            "nonce": h.nonce,
        },
        "txs": [
            {
                "inputs": [{"txid": i.prev_txid.hex(), "vout": i.vout} for i in tx.inputs],
                "outputs": [{"value": o.value, "address": o.address} for o in tx.outputs],
            }
            for tx in block.txs
        ],
    }


def block_from_json(obj: dict) -> Block:
    h = obj["header"]
    header = BlockHeader(
        version=int(h["version"]),
        prev_hash=bytes.fromhex(h["prev_hash"]),
        merkle_root=bytes.fromhex(h["merkle_root"]),
        time=int(h["time"]),
        bits=int(h["bits"], 16),
        nonce=int(h["nonce"]),
    )
    txs = tuple(
        Transaction(
            tuple(TxIn(bytes.fromhex(i["txid"]), int(i["vout"])) for i in tx["inputs"]),
            tuple(TxOut(int(o["value"]), decode_address(o["address"])) for o in tx["outputs"]),
        )
        for tx in obj["txs"]
    )
    return Block(header, txs, int(obj["height"]))


def write_chain(blocks: Iterable[Block], fh: IO[str]) -> None:
    for b in blocks:
        fh.write(json.dumps(block_to_json(b), separators=(",", ":")) + "\n")


def read_chain(fh: IO[str]) -> list[Block]:
    blocks = [block_from_json(json.loads(line)) for line in fh if line.strip()]
    for i, b in enumerate(blocks):
        if b.height != i:
            raise ChainError(f"block at line {i} has height {b.height}")
    return blocks


def iter_txs(blocks: Iterable[Block]) -> Iterator[tuple[int, Transaction]]:
    for b in blocks:
        for tx in b.txs:
            yield b.height, tx
