"""Single-server computational PIR from Paillier encryption (recursion depth 1).

The client sends an encrypted indicator vector, one ciphertext per row.
The server treats each row as a sequence of big-integer chunks and returns,
per chunk, the homomorphic combination ``prod_j E(q_j) ** D[j]``, which
decrypts to the selected row's chunk.  Sizes depend only on the modulus
length and the database shape, never on the row index.

Query blob::

    u16 LE  L (modulus bytes)
    L       modulus N, big-endian
    u32 LE  num_rows
    num_rows x 2L   ciphertexts mod N^2, big-endian

Response blob::

    u32 LE  n_chunks
    n_chunks x 2L   ciphertexts
"""
from __future__ import annotations

import random
import secrets
import struct
from dataclasses import dataclass, field

import gmpy2

from .database import PirDatabase
from .itpir import ProtocolError

DEFAULT_SECURITY_BITS = 2048


@dataclass(frozen=True)
class CpirKey:
    n: int
    lam: int = field(repr=False)
    mu: int = field(repr=False)

    @property
    def bits(self) -> int:
        return self.n.bit_length()

    @property
    def modulus_bytes(self) -> int:
        return (self.bits + 7) // 8

    @property
    def chunk_bytes(self) -> int:
        # any value below 2**(bits-1) is below n
        return (self.bits - 1) // 8

    @classmethod
    def generate(cls, bits: int = DEFAULT_SECURITY_BITS, seed: int | None = None) -> "CpirKey":
        if bits < 64 or bits % 2:
            raise ValueError("modulus size must be an even number of bits >= 64")
        rand = random.Random(seed) if seed is not None else secrets.SystemRandom()
        half = bits // 2
        while True:
            p = _prime(half, rand)
            q = _prime(half, rand)
            n = p * q
            if p != q and n.bit_length() == bits:
                break
        lam = int(gmpy2.lcm(p - 1, q - 1))
        mu = int(gmpy2.invert(lam, n))
        return cls(n, lam, mu)

    def encrypt(self, m: int, rand: random.Random) -> int:
        n = gmpy2.mpz(self.n)
        n2 = n * n
        r = rand.randrange(1, self.n)
        return int((1 + m * n) * gmpy2.powmod(r, n, n2) % n2)

    def decrypt(self, c: int) -> int:
        n = gmpy2.mpz(self.n)
        u = gmpy2.powmod(c, self.lam, n * n)
        return int((u - 1) // n * self.mu % n)


def _prime(bits: int, rand) -> int:
    candidate = rand.getrandbits(bits) | (3 << (bits - 2)) | 1
    return int(gmpy2.next_prime(candidate))


@dataclass(frozen=True)
class CpirQuery:
    blob: bytes = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.blob)


@dataclass(frozen=True)
class CpirResponse:
    blob: bytes = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.blob)


@dataclass(frozen=True)
class CpirState:
    key: CpirKey
    row_width: int


def n_chunks(row_width: int, key_bits: int) -> int:
    chunk = (key_bits - 1) // 8
    return -(-row_width // chunk)


def query_size(num_rows: int, key_bits: int) -> int:
    L = (key_bits + 7) // 8
    return 2 + L + 4 + num_rows * 2 * L


def response_size(row_width: int, key_bits: int) -> int:
    L = (key_bits + 7) // 8
    return 4 + n_chunks(row_width, key_bits) * 2 * L


def cpir_gen_query(
    row_index: int,
    db_shape: tuple[int, int],
    security_param: int = DEFAULT_SECURITY_BITS,
    rng_seed: int | None = None,
    key: CpirKey | None = None,
) -> tuple[CpirQuery, CpirState]:
    num_rows, row_width = db_shape
    if not 0 <= row_index < num_rows:
        raise ValueError(f"row {row_index} outside 0..{num_rows - 1}")
    if key is None:
        key = CpirKey.generate(security_param, rng_seed)
    rand = random.Random(rng_seed) if rng_seed is not None else secrets.SystemRandom()
    L = key.modulus_bytes
    parts = [struct.pack("<H", L), key.n.to_bytes(L, "big"), struct.pack("<I", num_rows)]
    for j in range(num_rows):
        parts.append(key.encrypt(int(j == row_index), rand).to_bytes(2 * L, "big"))
    return CpirQuery(b"".join(parts)), CpirState(key, row_width)


def _parse_query(blob: bytes) -> tuple[int, int, list[int]]:
    if len(blob) < 2:
        raise ProtocolError("truncated C-PIR query")
    (L,) = struct.unpack_from("<H", blob, 0)
    if len(blob) < 2 + L + 4:
        raise ProtocolError("truncated C-PIR query header")
    n = int.from_bytes(blob[2 : 2 + L], "big")
    (rows,) = struct.unpack_from("<I", blob, 2 + L)
    body = blob[2 + L + 4 :]
    if n < 3 or len(body) != rows * 2 * L:
        raise ProtocolError(f"C-PIR query body is {len(body)} bytes, expected {rows * 2 * L}")
    n2 = n * n
    cts = []
    for j in range(rows):
        c = int.from_bytes(body[j * 2 * L : (j + 1) * 2 * L], "big")
        if not 0 < c < n2:
            raise ProtocolError(f"ciphertext {j} outside Z*_(N^2)")
        cts.append(c)
    return n, L, cts


def cpir_compute(query: CpirQuery, db: PirDatabase) -> CpirResponse:
    n, L, cts = _parse_query(query.blob)
    if len(cts) != db.num_rows:
        raise ProtocolError(f"query covers {len(cts)} rows, database has {db.num_rows}")
    chunk = (n.bit_length() - 1) // 8
    if chunk < 1:
        raise ProtocolError("modulus too small")
    n2 = gmpy2.mpz(n) * n
    cts = [gmpy2.mpz(c) for c in cts]
    width = db.row_width
    out = [struct.pack("<I", -(-width // chunk))]
    for start in range(0, width, chunk):
        block = db.matrix[:, start : start + chunk]
        acc = gmpy2.mpz(1)
        for j in range(db.num_rows):
            d = int.from_bytes(block[j].tobytes(), "big")
            if d:
                acc = acc * gmpy2.powmod(cts[j], d, n2) % n2
        out.append(int(acc).to_bytes(2 * L, "big"))
    return CpirResponse(b"".join(out))


def cpir_decode(response: CpirResponse, state: CpirState) -> bytes:
    key = state.key
    L = key.modulus_bytes
    chunk = key.chunk_bytes
    expected = n_chunks(state.row_width, key.bits)
    blob = response.blob
    if len(blob) != 4 + expected * 2 * L or struct.unpack_from("<I", blob)[0] != expected:
        raise ProtocolError("C-PIR response has the wrong size")
    out = []
    for i in range(expected):
        c = int.from_bytes(blob[4 + i * 2 * L : 4 + (i + 1) * 2 * L], "big")
        if not 0 < c < key.n * key.n:
            raise ProtocolError(f"response ciphertext {i} out of range")
        m = key.decrypt(c)
        size = min(chunk, state.row_width - i * chunk)
        if m >= 1 << (8 * size):
            raise ProtocolError(f"chunk {i} decrypts outside its byte range")
        out.append(m.to_bytes(size, "big"))
    return b"".join(out)
