"""Shamir-share IT-PIR over GF(2^8).

The client hides a row index ``i`` by giving each row ``j`` a random
degree-t polynomial with constant term ``[i == j]`` and sending server ``s``
the evaluations at its point ``alphas[s]``.  Each server answers with the
vector-by-matrix product of its shares and the database; the answers are
shares of row ``i`` and are reconstructed column-wise at zero.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .database import PirDatabase
from .field import (
    LOG,
    EXP,
    MUL,
    DecodeError,
    InsufficientSharesError,
    berlekamp_welch,
    gf_pow,
    lagrange_coeffs_at_zero,
    vec_mat_mul,
)


class ProtocolError(ValueError):
    """A query or response does not fit the database it targets."""


@dataclass(frozen=True)
class PirParams:
    """Server count, privacy level, expected responders and Byzantine budget.

    ``t = 0`` is accepted so that a single server can be driven through the
    IT-PIR code path for cost measurement; such a query is not private.
    """

    ell: int
    t: int
    k: int
    v: int = 0
    alphas: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.alphas:
            object.__setattr__(self, "alphas", tuple(range(1, self.ell + 1)))
        if not 0 <= self.t < self.k <= self.ell:
            raise ValueError(f"need 0 <= t < k <= ell, got t={self.t} k={self.k} ell={self.ell}")
        if self.v < 0 or self.v > (self.k - self.t - 1) // 2:
            raise ValueError(f"v={self.v} exceeds unique-decoding radius for k={self.k}, t={self.t}")
        if len(self.alphas) != self.ell:
            raise ValueError("need one evaluation point per server")
        if len(set(self.alphas)) != self.ell or not all(0 < a < 256 for a in self.alphas):
            raise ValueError("evaluation points must be distinct nonzero bytes")

    @classmethod
    def for_servers(cls, ell: int, t: int = 1, v: int = 0) -> "PirParams":
        return cls(ell=ell, t=t, k=ell, v=v)

    @property
    def min_responses(self) -> int:
        return self.t + 2 * self.v + 1


@dataclass(frozen=True)
class ItPirQuery:
    server_index: int
    shares: np.ndarray = field(repr=False)

    def to_bytes(self) -> bytes:
        return self.shares.tobytes()


@dataclass(frozen=True)
class ItPirResponse:
    server_index: int
    data: np.ndarray = field(repr=False)

    def to_bytes(self) -> bytes:
        return self.data.tobytes()


def _random_bytes(shape: tuple[int, ...], rng: np.random.Generator | None) -> np.ndarray:
    n = int(np.prod(shape))
    if rng is None:
        return np.frombuffer(os.urandom(n), dtype=np.uint8).reshape(shape)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


def itpir_gen_queries(
    row_index: int,
    db_shape: tuple[int, int],
    params: PirParams,
    rng_seed: int | np.random.Generator | None = None,
) -> list[ItPirQuery]:
    """Share the indicator of ``row_index`` among ``params.ell`` servers.

    ``rng_seed=None`` draws blinding coefficients from ``os.urandom``.
    """
    num_rows = db_shape[0]
    if not 0 <= row_index < num_rows:
        raise ValueError(f"row {row_index} outside 0..{num_rows - 1}")
    if isinstance(rng_seed, np.random.Generator) or rng_seed is None:
        rng = rng_seed
    else:
        rng = np.random.default_rng(rng_seed)
    coeffs = _random_bytes((params.t, num_rows), rng)
    queries = []
    for s, alpha in enumerate(params.alphas):
        shares = np.zeros(num_rows, dtype=np.uint8)
        shares[row_index] = 1
        for d in range(params.t):
            shares ^= MUL[coeffs[d], gf_pow(alpha, d + 1)]
        queries.append(ItPirQuery(s, shares))
    return queries


def itpir_compute(query: ItPirQuery, db: PirDatabase) -> ItPirResponse:
    shares = np.asarray(query.shares, dtype=np.uint8)
    if shares.shape != (db.num_rows,):
        raise ProtocolError(f"query has {shares.size} shares, database has {db.num_rows} rows")
    return ItPirResponse(query.server_index, vec_mat_mul(shares, db.matrix))


def _eval_basis(xs: Sequence[int], at: int) -> list[int]:
    """Lagrange basis polynomials for nodes ``xs`` evaluated at ``at``."""
    out = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = _mul(num, at ^ xj)
                den = _mul(den, xi ^ xj)
        out.append(_mul(num, EXP[255 - LOG[den]]))
    return out


def _mul(a: int, b: int) -> int:
    return int(MUL[a, b])


def _combine(weights: Sequence[int], rows: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros_like(rows[0])
    for w, r in zip(weights, rows):
        if w:
            acc ^= MUL[w, r]
    return acc


def itpir_decode(responses: Sequence[ItPirResponse], params: PirParams) -> bytes:
    """Reconstruct the requested row, correcting up to ``params.v`` bad answers."""
    seen = {}
    for r in responses:
        if r.server_index in seen:
            raise ProtocolError(f"duplicate response from server {r.server_index}")
        seen[r.server_index] = r
    responses = list(seen.values())
    if len(responses) < params.t + 1:
        raise InsufficientSharesError(
            f"need at least {params.t + 1} responses, got {len(responses)}"
        )
    widths = {r.data.shape for r in responses}
    if len(widths) != 1:
        raise ProtocolError(f"responses disagree on row width: {sorted(widths)}")
    xs = [params.alphas[r.server_index] for r in responses]
    ys = [np.asarray(r.data, dtype=np.uint8) for r in responses]
    base_x, base_y = xs[: params.t + 1], ys[: params.t + 1]
    row = _combine(lagrange_coeffs_at_zero(base_x), base_y)
    if params.v == 0:
        return row.tobytes()

    if len(responses) < params.min_responses:
        raise InsufficientSharesError(
            f"need {params.min_responses} responses to correct {params.v} errors"
        )
    bad = np.zeros(row.shape, dtype=bool)
    for x, y in zip(xs[params.t + 1 :], ys[params.t + 1 :]):
        predicted = _combine(_eval_basis(base_x, x), base_y)
        bad |= predicted != y
    for col in np.flatnonzero(bad):
        points = [(x, int(y[col])) for x, y in zip(xs, ys)]
        try:
            row[col] = berlekamp_welch(points, params.t, params.v)(0)
        except DecodeError as exc:
            raise DecodeError(f"column {col}: {exc}") from None
    return row.tobytes()


def itpir_cost(n_rows_fetched: int, db_shape: tuple[int, int], ell: int) -> int:
    """Payload bytes moved for ``n_rows_fetched`` row fetches over ``ell`` servers."""
    num_rows, row_width = db_shape
    return n_rows_fetched * ell * (num_rows + row_width)
