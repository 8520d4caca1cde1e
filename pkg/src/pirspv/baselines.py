"""Comparator SPV protocols: BIP-37 Bloom filters with merkleblocks, and Naive SPV.

Both are cost models.  Sizes are computed from the Bitcoin wire
serialization rules rather than measured against a live node, and
the 24-byte P2P message header is left out everywhere.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Sequence

import mmh3

from .builder import partition_chain
from .chain import Block, BlockHeader, Transaction, dsha256

MAX_BLOOM_FILTER_SIZE = 36_000  # bytes
MAX_HASH_FUNCS = 50
SEED_STEP = 0xFBA4C795
LN2 = math.log(2)
DEFAULT_FP_RATE = 0.0001


class BaselineError(ValueError):
    pass


def compact_size(n: int) -> bytes:
    if n < 0xFD:
        return bytes([n])
    if n <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", n)
    if n <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", n)
    return b"\xff" + struct.pack("<Q", n)


def read_compact_size(raw: bytes, pos: int) -> tuple[int, int]:
    first = raw[pos]
    if first < 0xFD:
        return first, pos + 1
    fmt, size = {0xFD: ("<H", 2), 0xFE: ("<I", 4), 0xFF: ("<Q", 8)}[first]
    return struct.unpack_from(fmt, raw, pos + 1)[0], pos + 1 + size


# --- Bloom filter ------------------------------------------------------------


class BloomFilter:
    """BIP-37 filter: murmur3 with seed ``i * 0xFBA4C795 + tweak``."""

    def __init__(self, n_elements: int, fp_rate: float, tweak: int = 0):
        if n_elements < 1:
            raise BaselineError("filter must be sized for at least one element")
        if not 0.0 < fp_rate < 1.0:
            raise BaselineError("fp_rate must lie in (0, 1)")
        size = int(-1.0 / (LN2 * LN2) * n_elements * math.log(fp_rate) / 8)
        size = max(1, min(size, MAX_BLOOM_FILTER_SIZE))
        self.data = bytearray(size)
        self.n_hash_funcs = max(1, min(int(size * 8 / n_elements * LN2), MAX_HASH_FUNCS))
        self.tweak = tweak & 0xFFFFFFFF
        self.fp_rate = fp_rate

    def _bits(self, item: bytes):
        nbits = len(self.data) * 8
        for i in range(self.n_hash_funcs):
            seed = (i * SEED_STEP + self.tweak) & 0xFFFFFFFF
            yield mmh3.hash(item, seed, signed=False) % nbits

    def insert(self, item: bytes) -> None:
        for b in self._bits(item):
            self.data[b >> 3] |= 1 << (b & 7)

    def contains(self, item: bytes) -> bool:
        return all(self.data[b >> 3] & (1 << (b & 7)) for b in self._bits(item))

    __contains__ = contains

    def serialize(self) -> bytes:
        """``filterload`` body with nFlags = BLOOM_UPDATE_NONE."""
        return (compact_size(len(self.data)) + bytes(self.data)
                + struct.pack("<II", self.n_hash_funcs, self.tweak) + b"\x00")

    def matches_tx(self, tx: Transaction) -> bool:
        """BIP-37 relevance test: txid, output data pushes, spent outpoints."""
        if self.contains(tx.txid):
            return True
        if any(self.contains(o.hash160) for o in tx.outputs):
            return True
        return any(self.contains(i.prev_txid + struct.pack("<I", i.vout)) for i in tx.inputs)


# --- partial Merkle tree -----------------------------------------------------


def _tree_width(n_txs: int, height: int) -> int:
    return (n_txs + (1 << height) - 1) >> height


def _tree_height(n_txs: int) -> int:
    h = 0
    while _tree_width(n_txs, h) > 1:
        h += 1
    return h


@dataclass(frozen=True)
class MerkleBlock:
    header: BlockHeader
    total_txs: int
    hashes: tuple[bytes, ...]
    flags: tuple[bool, ...]

    def flag_bytes(self) -> bytes:
        out = bytearray((len(self.flags) + 7) // 8)
        for i, f in enumerate(self.flags):
            if f:
                out[i >> 3] |= 1 << (i & 7)
        return bytes(out)

    def serialize(self) -> bytes:
        fb = self.flag_bytes()
        return (self.header.serialize() + struct.pack("<I", self.total_txs)
                + compact_size(len(self.hashes)) + b"".join(self.hashes)
                + compact_size(len(fb)) + fb)

    def size(self) -> int:
        return (80 + 4 + len(compact_size(len(self.hashes))) + 32 * len(self.hashes)
                + len(compact_size((len(self.flags) + 7) // 8)) + (len(self.flags) + 7) // 8)

    @classmethod
    def parse(cls, raw: bytes) -> "MerkleBlock":
        header = BlockHeader.parse(raw[:80])
        (total,) = struct.unpack_from("<I", raw, 80)
        n, pos = read_compact_size(raw, 84)
        hashes = tuple(raw[pos + 32 * i : pos + 32 * (i + 1)] for i in range(n))
        pos += 32 * n
        nb, pos = read_compact_size(raw, pos)
        fb = raw[pos : pos + nb]
        if pos + nb != len(raw):
            raise BaselineError("trailing bytes after merkleblock")
        flags = tuple(bool(fb[i >> 3] >> (i & 7) & 1) for i in range(8 * nb))
        return cls(header, total, hashes, flags)


def build_partial_tree(txids: Sequence[bytes], matches: Sequence[bool]) -> tuple[list[bytes], list[bool]]:
    """Depth-first partial tree as in Bitcoin's ``CPartialMerkleTree``."""
    n = len(txids)
    if n == 0 or len(matches) != n:
        raise BaselineError("need one match flag per txid")
    hashes: list[bytes] = []
    flags: list[bool] = []

    def calc(height: int, pos: int) -> bytes:
        if height == 0:
            return txids[pos]
        left = calc(height - 1, pos * 2)
        right = calc(height - 1, pos * 2 + 1) if pos * 2 + 1 < _tree_width(n, height - 1) else left
        return dsha256(left + right)

    def walk(height: int, pos: int) -> None:
        lo, hi = pos << height, min((pos + 1) << height, n)
        parent = any(matches[lo:hi])
        flags.append(parent)
        if height == 0 or not parent:
            hashes.append(calc(height, pos))
            return
        walk(height - 1, pos * 2)
        if pos * 2 + 1 < _tree_width(n, height - 1):
            walk(height - 1, pos * 2 + 1)

    walk(_tree_height(n), 0)
    return hashes, flags


def extract_matches(mb: MerkleBlock) -> tuple[bytes, list[bytes]]:
    """Walk a partial tree; return ``(root, matched txids)``.

    Raises :class:`BaselineError` when the hash/flag stream is malformed
    or not fully consumed.
    """
    n = mb.total_txs
    if n == 0 or len(mb.hashes) > n:
        raise BaselineError("bad transaction count")
    hash_i = flag_i = 0
    matched: list[bytes] = []

    def walk(height: int, pos: int) -> bytes:
        nonlocal hash_i, flag_i
        if flag_i >= len(mb.flags):
            raise BaselineError("ran out of flag bits")
        parent = mb.flags[flag_i]
        flag_i += 1
        if height == 0 or not parent:
            if hash_i >= len(mb.hashes):
                raise BaselineError("ran out of hashes")
            h = mb.hashes[hash_i]
            hash_i += 1
            if height == 0 and parent:
                matched.append(h)
            return h
        left = walk(height - 1, pos * 2)
        if pos * 2 + 1 < _tree_width(n, height - 1):
            right = walk(height - 1, pos * 2 + 1)
            if right == left:
                raise BaselineError("duplicate sibling hashes (CVE-2012-2459 shape)")
        else:
            right = left
        return dsha256(left + right)

    root = walk(_tree_height(n), 0)
    if hash_i != len(mb.hashes) or (flag_i + 7) // 8 != (len(mb.flags) + 7) // 8:
        raise BaselineError("partial tree not fully consumed")
    if any(mb.flags[flag_i:]):
        raise BaselineError("non-zero padding flag bits")
    return root, matched


def verify_merkleblock(mb: MerkleBlock) -> list[bytes]:
    """Matched txids if the partial tree hashes to the header's root."""
    root, matched = extract_matches(mb)
    if root != mb.header.merkle_root:
        raise BaselineError("partial tree does not reproduce the merkle root")
    return matched


def build_merkleblock(block: Block, bloom: BloomFilter) -> tuple[MerkleBlock, list[Transaction]]:
    matches = [bloom.matches_tx(tx) for tx in block.txs]
    hashes, flags = build_partial_tree(block.txids, matches)
    mb = MerkleBlock(block.header, len(block.txs), tuple(hashes), tuple(flags))
    return mb, [tx for tx, m in zip(block.txs, matches) if m]


# --- bandwidth models --------------------------------------------------------


class ChainIndex:
    """txid -> height map and cumulative block sizes, built once per chain."""

    def __init__(self, chain: Sequence[Block]):
        self.heights = {tx.txid: b.height for b in chain for tx in b.txs}
        self.cumulative = []
        acc = 0
        for b in chain:
            acc += b.size()
            self.cumulative.append(acc)

    def locate(self, txid: bytes) -> int:
        try:
            return self.heights[txid]
        except KeyError:
            raise BaselineError(f"txid {txid.hex()} not in chain") from None


def _locate(txid: bytes, chain: Sequence[Block], index: ChainIndex | None) -> int:
    if index is not None:
        return index.locate(txid)
    for b in chain:
        if any(tx.txid == txid for tx in b.txs):
            return b.height
    raise BaselineError(f"txid {txid.hex()} not in chain")


def scan_range(height: int, chain: Sequence[Block]) -> tuple[int, int]:
    """Heights of the temporal period that holds ``height``, inclusive."""
    parts = partition_chain(chain)
    for blocks in (parts.weekly, parts.monthly, parts.alltime):
        if blocks and blocks[0].height <= height <= blocks[-1].height:
            return blocks[0].height, blocks[-1].height
    raise BaselineError(f"height {height} outside the chain")


def bip37_bandwidth(
    txid: bytes,
    chain: Sequence[Block],
    fp_rate: float = DEFAULT_FP_RATE,
    tweak: int = 0,
    scan: tuple[int, int] | None = None,
    index: ChainIndex | None = None,
) -> int:
    """Reply bytes for a fresh one-element filter over the scanned blocks.

    Every scanned block yields a merkleblock; every matching transaction
    (true or false positive) follows it in full.  ``scan`` defaults to
    the temporal period containing the transaction.
    """
    height = _locate(txid, chain, index)
    lo, hi = scan if scan is not None else scan_range(height, chain)
    if not lo <= height <= hi:
        raise BaselineError("scan range does not include the transaction's block")
    bloom = BloomFilter(1, fp_rate, tweak)
    bloom.insert(txid)
    total = 0
    for b in chain[lo : hi + 1]:
        mb, txs = build_merkleblock(b, bloom)
        total += mb.size() + sum(len(tx.serialize()) for tx in txs)
    return total


def naive_bandwidth(txid: bytes, chain: Sequence[Block], index: ChainIndex | None = None) -> int:
    """Serialized size of every block from genesis through the containing one."""
    height = _locate(txid, chain, index)
    if index is not None:
        return index.cumulative[height]
    return sum(b.size() for b in chain[: height + 1])
