"""GF(2^8) arithmetic and the polynomial machinery used by the IT-PIR backend.

Field elements are plain ints in ``range(256)``.  Addition is XOR; products
are reduced modulo the AES polynomial x^8 + x^4 + x^3 + x + 1 (0x11b).
The numpy tables (``MUL``, ``INV``) are what the PIR hot paths index into.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

REDUCTION_POLY = 0x11B
GENERATOR = 0x03


class FieldError(ValueError):
    """Domain error: zero inverse, duplicate evaluation points, bad element."""


class InsufficientSharesError(FieldError):
    pass


class DecodeError(FieldError):
    """Too many corrupted points for the error budget."""


def _build_tables() -> tuple[list[int], list[int]]:
    exp = [0] * 510
    log = [0] * 256
    x = 1
    for i in range(255):
        exp[i] = x
        log[x] = i
        # x * 3 = x * 2 ^ x
        x2 = x << 1
        if x2 & 0x100:
            x2 ^= REDUCTION_POLY
        x = x2 ^ x
    for i in range(255, 510):
        exp[i] = exp[i - 255]
    return exp, log


EXP, LOG = _build_tables()


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return EXP[LOG[a] + LOG[b]]


def gf_inv(a: int) -> int:
    if a == 0:
        raise FieldError("zero has no multiplicative inverse")
    return EXP[255 - LOG[a]]


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise FieldError("division by zero")
    if a == 0:
        return 0
    return EXP[LOG[a] + 255 - LOG[b]]


def gf_pow(a: int, n: int) -> int:
    if n == 0:
        return 1
    if a == 0:
        return 0
    return EXP[(LOG[a] * n) % 255]


def _mul_table() -> np.ndarray:
    log = np.array(LOG, dtype=np.int64)
    exp = np.array(EXP, dtype=np.uint8)
    table = exp[log[:, None] + log[None, :]]
    table[0, :] = 0
    table[:, 0] = 0
    return table


#: MUL[a, b] == gf_mul(a, b); fancy-index with arrays for vectorised products.
MUL: np.ndarray = _mul_table()
INV: np.ndarray = np.array([0] + [gf_inv(a) for a in range(1, 256)], dtype=np.uint8)


def vec_mat_mul(vec: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Return ``vec @ mat`` over GF(2^8) for a uint8 vector and matrix."""
    if vec.shape[0] != mat.shape[0]:
        raise FieldError(f"shape mismatch: {vec.shape[0]} vs {mat.shape[0]} rows")
    nz = np.flatnonzero(vec)
    if nz.size == 0:
        return np.zeros(mat.shape[1], dtype=np.uint8)
    products = MUL[vec[nz][:, None], mat[nz]]
    return np.bitwise_xor.reduce(products, axis=0)


@dataclass(frozen=True)
class Poly:
    """Polynomial over GF(2^8), coefficients lowest degree first."""

    coeffs: tuple[int, ...]

    def __post_init__(self) -> None:
        c = list(self.coeffs)
        while len(c) > 1 and c[-1] == 0:
            c.pop()
        object.__setattr__(self, "coeffs", tuple(c) if c else (0,))

    @property
    def degree(self) -> int:
        if self.coeffs == (0,):
            return -1
        return len(self.coeffs) - 1

    def __call__(self, x: int) -> int:
        acc = 0
        for c in reversed(self.coeffs):
            acc = gf_mul(acc, x) ^ c
        return acc


def _poly_mul(a: Sequence[int], b: Sequence[int]) -> list[int]:
    out = [0] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        if ai == 0:
            continue
        for j, bj in enumerate(b):
            out[i + j] ^= gf_mul(ai, bj)
    return out


def _poly_divmod(num: Sequence[int], den: Sequence[int]) -> tuple[list[int], list[int]]:
    num = list(num)
    den = list(den)
    while len(den) > 1 and den[-1] == 0:
        den.pop()
    if den == [0]:
        raise FieldError("polynomial division by zero")
    lead_inv = gf_inv(den[-1])
    quot = [0] * max(1, len(num) - len(den) + 1)
    for i in range(len(num) - len(den), -1, -1):
        coef = gf_mul(num[i + len(den) - 1], lead_inv)
        quot[i] = coef
        if coef:
            for j, d in enumerate(den):
                num[i + j] ^= gf_mul(coef, d)
    rem = num[: len(den) - 1] or [0]
    return quot, rem


def _check_points(points: Sequence[tuple[int, int]]) -> None:
    xs = [x for x, _ in points]
    if len(set(xs)) != len(xs):
        raise FieldError("duplicate x-coordinates")
    if any(x == 0 for x in xs):
        raise FieldError("x-coordinate 0 is reserved for the secret")
    for x, y in points:
        if not (0 <= x < 256 and 0 <= y < 256):
            raise FieldError(f"not a field element: ({x}, {y})")


def lagrange_coeffs_at_zero(xs: Sequence[int]) -> list[int]:
    """Weights w_i with f(0) = sum w_i * f(x_i) for deg f < len(xs)."""
    weights = []
    for i, xi in enumerate(xs):
        num, den = 1, 1
        for j, xj in enumerate(xs):
            if i != j:
                num = gf_mul(num, xj)
                den = gf_mul(den, xi ^ xj)
        weights.append(gf_div(num, den))
    return weights


def lagrange_at_zero(points: Sequence[tuple[int, int]], t: int) -> int:
    """Recover f(0) of the degree-<=t polynomial through the first t+1 points."""
    _check_points(points)
    if len(points) < t + 1:
        raise InsufficientSharesError(f"need {t + 1} points, got {len(points)}")
    used = points[: t + 1]
    weights = lagrange_coeffs_at_zero([x for x, _ in used])
    acc = 0
    for w, (_, y) in zip(weights, used):
        acc ^= gf_mul(w, y)
    return acc


def interpolate(points: Sequence[tuple[int, int]]) -> Poly:
    """The unique polynomial of degree < len(points) through ``points``."""
    xs = [x for x, _ in points]
    if len(set(xs)) != len(xs):
        raise FieldError("duplicate x-coordinates")
    result = [0] * max(1, len(points))
    for i, (xi, yi) in enumerate(points):
        basis = [1]
        den = 1
        for j, xj in enumerate(xs):
            if i != j:
                basis = _poly_mul(basis, [xj, 1])
                den = gf_mul(den, xi ^ xj)
        scale = gf_div(yi, den)
        for k, b in enumerate(basis):
            result[k] ^= gf_mul(scale, b)
    return Poly(tuple(result))


def _solve(matrix: list[list[int]], rhs: list[int]) -> list[int] | None:
    """One solution of a (possibly underdetermined) GF(2^8) system, or None."""
    rows = len(matrix)
    cols = len(matrix[0]) if rows else 0
    aug = [list(r) + [b] for r, b in zip(matrix, rhs)]
    pivots = []
    r = 0
    for c in range(cols):
        pivot = next((i for i in range(r, rows) if aug[i][c]), None)
        if pivot is None:
            continue
        aug[r], aug[pivot] = aug[pivot], aug[r]
        inv = gf_inv(aug[r][c])
        aug[r] = [gf_mul(inv, v) for v in aug[r]]
        for i in range(rows):
            if i != r and aug[i][c]:
                f = aug[i][c]
                aug[i] = [vi ^ gf_mul(f, vr) for vi, vr in zip(aug[i], aug[r])]
        pivots.append(c)
        r += 1
        if r == rows:
            break
    for i in range(r, rows):
        if aug[i][cols]:
            return None
    sol = [0] * cols
    for i, c in enumerate(pivots):
        sol[c] = aug[i][cols]
    return sol


def berlekamp_welch(points: Sequence[tuple[int, int]], t: int, v: int) -> Poly:
    """Decode the degree-<=t polynomial agreeing with all but at most v points.

    Unique decoding only: requires len(points) >= t + 2v + 1.
    """
    _check_points(points)
    k = len(points)
    if k < t + 2 * v + 1:
        raise InsufficientSharesError(f"need {t + 2 * v + 1} points for t={t}, v={v}; got {k}")
    if v == 0:
        poly = interpolate(points[: t + 1])
        if any(poly(x) != y for x, y in points):
            raise DecodeError("points are not consistent with a degree-t polynomial")
        return poly

    # Q(x) = y * E(x) with E monic of degree v, deg Q <= t + v.
    n_q = t + v + 1
    matrix, rhs = [], []
    for x, y in points:
        row = [gf_pow(x, j) for j in range(n_q)]
        row += [gf_mul(y, gf_pow(x, j)) for j in range(v)]
        matrix.append(row)
        rhs.append(gf_mul(y, gf_pow(x, v)))
    sol = _solve(matrix, rhs)
    if sol is None:
        raise DecodeError("no error-locator polynomial within the error budget")
    q = sol[:n_q]
    e = sol[n_q:] + [1]
    quot, rem = _poly_divmod(q, e)
    if any(rem):
        raise DecodeError("error locator does not divide the key equation")
    poly = Poly(tuple(quot))
    if poly.degree > t:
        raise DecodeError("decoded polynomial exceeds the degree bound")
    agree = sum(1 for x, y in points if poly(x) == y)
    if agree < k - v:
        raise DecodeError(f"decoded polynomial agrees with only {agree} of {k} points")
    return poly


def random_poly(secret: int, t: int, rng: np.random.Generator) -> Poly:
    coeffs = [secret] + [int(c) for c in rng.integers(0, 256, size=t)]
    return Poly(tuple(coeffs))


def evaluate_many(poly: Poly, xs: Iterable[int]) -> list[int]:
    return [poly(x) for x in xs]
