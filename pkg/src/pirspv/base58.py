"""Base58Check encoding for P2PKH addresses."""
from __future__ import annotations

import hashlib

ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"
_INDEX = {c: i for i, c in enumerate(ALPHABET)}

P2PKH_VERSION = 0x00


class Base58Error(ValueError):
    pass


def dsha256(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def b58encode(data: bytes) -> str:
    n = int.from_bytes(data, "big")
    out = []
    while n:
        n, r = divmod(n, 58)
        out.append(ALPHABET[r])
    pad = len(data) - len(data.lstrip(b"\x00"))
    return "1" * pad + "".join(reversed(out))


def b58decode(text: str) -> bytes:
    n = 0
    for c in text:
        try:
            n = n * 58 + _INDEX[c]
        except KeyError:
            raise Base58Error(f"invalid base58 character {c!r}") from None
    body = n.to_bytes((n.bit_length() + 7) // 8, "big") if n else b""
    pad = len(text) - len(text.lstrip("1"))
    return b"\x00" * pad + body


def b58check_encode(payload: bytes) -> str:
    return b58encode(payload + dsha256(payload)[:4])


def b58check_decode(text: str) -> bytes:
    """Return version+payload; raises Base58Error on a bad checksum."""
    raw = b58decode(text)
    if len(raw) < 5:
        raise Base58Error("too short for a checksum")
    body, check = raw[:-4], raw[-4:]
    if dsha256(body)[:4] != check:
        raise Base58Error("checksum mismatch")
    return body


def address_payload(hash160: bytes) -> bytes:
    """25-byte decoded form: version byte, hash160, 4-byte checksum."""
    if len(hash160) != 20:
        raise Base58Error("hash160 must be 20 bytes")
    body = bytes([P2PKH_VERSION]) + hash160
    return body + dsha256(body)[:4]


def encode_address(hash160: bytes) -> str:
    return b58encode(address_payload(hash160))


def decode_address(text: str) -> bytes:
    """Inverse of encode_address; returns the hash160."""
    body = b58check_decode(text)
    if len(body) != 21 or body[0] != P2PKH_VERSION:
        raise Base58Error("not a P2PKH address")
    return body[1:]


def payload_to_address(payload: bytes) -> str:
    if len(payload) != 25:
        raise Base58Error("address payload must be 25 bytes")
    return b58encode(payload)
