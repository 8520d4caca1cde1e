"""Seeded synthetic chain generator with a UTXO ground-truth index."""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Iterable

from .chain import (
    ZERO_HASH,
    Block,
    BlockHeader,
    ChainError,
    Transaction,
    TxIn,
    TxOut,
    coinbase,
    merkle_root,
    mine,
)

REGTEST_BITS = 0x207FFFFF
MAX_OUTPUTS = 255


@dataclass(frozen=True)
class Utxo:
    txid: bytes
    height: int
    vout: int
    value: int
    hash160: bytes


@dataclass(frozen=True)
class SyntheticConfig:
    """Chain shape.

    Ranges are inclusive ``(lo, hi)``.  ``txs_per_block`` counts
    non-coinbase slots; each slot materialises with ``spend_probability``
    and spends 1..``inputs_per_tx`` outputs from earlier blocks.
    """

    n_blocks: int = 100
    txs_per_block: tuple[int, int] = (0, 3)
    n_addresses: int = 50
    outputs_per_tx: tuple[int, int] = (1, 3)
    inputs_per_tx: tuple[int, int] = (1, 2)
    spend_probability: float = 0.8
    difficulty_bits: int = REGTEST_BITS
    coinbase_value: int = 50 * 10**8
    start_time: int = 1_500_000_000
    block_interval: int = 600
    seed: int = 0

    def validate(self) -> None:
        def check_range(name, r, lo_min):
            lo, hi = r
            if lo < lo_min or hi < lo:
                raise ChainError(f"{name}: invalid range {r}")

        if self.n_blocks < 1:
            raise ChainError("n_blocks must be >= 1")
        if self.n_addresses < 1:
            raise ChainError("n_addresses must be >= 1")
        check_range("txs_per_block", self.txs_per_block, 0)
        check_range("outputs_per_tx", self.outputs_per_tx, 1)
        check_range("inputs_per_tx", self.inputs_per_tx, 1)
        if self.outputs_per_tx[1] > MAX_OUTPUTS:
            raise ChainError(f"at most {MAX_OUTPUTS} outputs per transaction")
        if not 0.0 <= self.spend_probability <= 1.0:
            raise ChainError("spend_probability must lie in [0, 1]")
        if self.coinbase_value < self.outputs_per_tx[1]:
            raise ChainError("coinbase value cannot fund the requested outputs")


def address_book(n: int, seed: int) -> list[bytes]:
    return [hashlib.sha256(f"addr:{seed}:{i}".encode()).digest()[:20] for i in range(n)]


class UtxoIndex:
    """Unspent outputs grouped by hash160."""

    def __init__(self, utxos: Iterable[Utxo] = ()):
        self._by_outpoint: dict[tuple[bytes, int], Utxo] = {}
        for u in utxos:
            self.add(u)

    def add(self, u: Utxo) -> None:
        self._by_outpoint[(u.txid, u.vout)] = u

    def spend(self, prev_txid: bytes, vout: int) -> Utxo:
        try:
            return self._by_outpoint.pop((prev_txid, vout))
        except KeyError:
            raise ChainError(f"spend of unknown output {prev_txid.hex()}:{vout}") from None

    def __len__(self) -> int:
        return len(self._by_outpoint)

    def __iter__(self):
        return iter(sorted(self._by_outpoint.values(), key=lambda u: (u.height, u.txid, u.vout)))

    def __contains__(self, outpoint: tuple[bytes, int]) -> bool:
        return outpoint in self._by_outpoint

    def by_address(self) -> dict[bytes, list[Utxo]]:
        out: dict[bytes, list[Utxo]] = {}
        for u in self:
            out.setdefault(u.hash160, []).append(u)
        return out

    def unspent_txids(self) -> set[bytes]:
        return {u.txid for u in self._by_outpoint.values()}


def generate_synthetic_chain(config: SyntheticConfig) -> tuple[list[Block], UtxoIndex]:
    config.validate()
    rng = random.Random(config.seed)
    book = address_book(config.n_addresses, config.seed)
    index = UtxoIndex()
    # spendable pool: outputs confirmed in earlier blocks
    pool: list[tuple[bytes, int, int]] = []
    blocks: list[Block] = []
    prev_hash = ZERO_HASH

    for height in range(config.n_blocks):
        cb = coinbase(height, config.coinbase_value, rng.choice(book))
        txs = [cb]
        new_outputs = [(cb, 0)]
        if height > 0:
            for _ in range(rng.randint(*config.txs_per_block)):
                if not pool or rng.random() >= config.spend_probability:
                    continue
                n_in = min(rng.randint(*config.inputs_per_tx), len(pool))
                inputs, total = [], 0
                for _ in range(n_in):
                    j = rng.randrange(len(pool))
                    pool[j], pool[-1] = pool[-1], pool[j]
                    prev_txid, vout, value = pool.pop()
                    index.spend(prev_txid, vout)
                    inputs.append(TxIn(prev_txid, vout))
                    total += value
                n_out = min(rng.randint(*config.outputs_per_tx), total)
                cuts = sorted(rng.sample(range(1, total), n_out - 1)) if n_out > 1 else []
                values = [b - a for a, b in zip([0] + cuts, cuts + [total])]
                outputs = tuple(TxOut(v, rng.choice(book)) for v in values)
                tx = Transaction(tuple(inputs), outputs)
                txs.append(tx)
                new_outputs.extend((tx, i) for i in range(len(outputs)))

        for tx, vout in new_outputs:
            out = tx.outputs[vout]
            index.add(Utxo(tx.txid, height, vout, out.value, out.hash160))
            pool.append((tx.txid, vout, out.value))

        header = mine(
            BlockHeader(
                version=1,
                prev_hash=prev_hash,
                merkle_root=merkle_root([tx.txid for tx in txs]),
                time=config.start_time + height * config.block_interval,
                bits=config.difficulty_bits,
                nonce=0,
            )
        )
        blocks.append(Block(header, tuple(txs), height))
        prev_hash = header.hash()
    return blocks, index


def replay_utxos(blocks: Iterable[Block]) -> UtxoIndex:
    """Recompute the unspent set by scanning blocks in order."""
    index = UtxoIndex()
    for block in blocks:
        for tx in block.txs:
            if not tx.is_coinbase:
                for i in tx.inputs:
                    index.spend(i.prev_txid, i.vout)
            for vout, out in enumerate(tx.outputs):
                index.add(Utxo(tx.txid, block.height, vout, out.value, out.hash160))
    return index
