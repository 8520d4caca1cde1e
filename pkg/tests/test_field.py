import itertools
import random

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pirspv.field import (
    MUL,
    DecodeError,
    FieldError,
    InsufficientSharesError,
    Poly,
    berlekamp_welch,
    gf_inv,
    gf_mul,
    interpolate,
    lagrange_at_zero,
    vec_mat_mul,
)


def slow_mul(a, b):
    """Shift-and-XOR reference multiply, independent of the log tables."""
    p = 0
    for _ in range(8):
        if b & 1:
            p ^= a
        hi = a & 0x80
        a = (a << 1) & 0xFF
        if hi:
            a ^= 0x1B
        b >>= 1
    return p


@pytest.fixture(scope="module")
def oracle_table():
    return np.array([[slow_mul(a, b) for b in range(256)] for a in range(256)], dtype=np.uint8)


def test_small_products():
    assert gf_mul(0x02, 0x03) == 0x06
    assert all(gf_mul(0, a) == 0 for a in range(256))
    # carries out of x^7 reduce to the polynomial's low byte
    assert gf_mul(0x80, 0x02) == 0x1B


def test_exhaustive_against_oracle(oracle_table):
    assert np.array_equal(MUL, oracle_table)
    for a in (0, 1, 0x53, 0xCA, 0xFF):
        for b in range(256):
            assert gf_mul(a, b) == oracle_table[a, b]


def test_known_aes_inverse():
    # FIPS-197 example: {53}^-1 = {CA}
    assert gf_inv(0x53) == 0xCA


def test_inverse_exhaustive(oracle_table):
    assert gf_inv(1) == 1
    for a in range(1, 256):
        inv = gf_inv(a)
        assert oracle_table[a, inv] == 1
        assert gf_inv(inv) == a
    with pytest.raises(FieldError):
        gf_inv(0)


def test_field_axioms_random_triples():
    rng = random.Random(7)
    for _ in range(10_000):
        a, b, c = rng.randrange(256), rng.randrange(256), rng.randrange(256)
        assert gf_mul(a, b) == gf_mul(b, a)
        assert gf_mul(gf_mul(a, b), c) == gf_mul(a, gf_mul(b, c))
        assert gf_mul(a, b ^ c) == gf_mul(a, b) ^ gf_mul(a, c)
        assert a ^ a == 0


def test_lagrange_constant_and_linear():
    assert lagrange_at_zero([(3, 0x2A)], t=0) == 0x2A
    # f(x) = x through (1,1), (2,2): f(0) = 0
    assert lagrange_at_zero([(1, 1), (2, 2)], t=1) == 0


def test_lagrange_errors():
    with pytest.raises(FieldError):
        lagrange_at_zero([(1, 4), (1, 5)], t=1)
    with pytest.raises(InsufficientSharesError):
        lagrange_at_zero([(1, 4)], t=1)
    with pytest.raises(FieldError):
        lagrange_at_zero([(0, 4), (1, 5)], t=1)


@given(
    t=st.integers(0, 4),
    seed=st.integers(0, 2**32 - 1),
)
def test_lagrange_every_subset(t, seed):
    rng = random.Random(seed)
    poly = Poly(tuple(rng.randrange(256) for _ in range(t + 1)))
    xs = rng.sample(range(1, 256), t + 3)
    points = [(x, poly(x)) for x in xs]
    for subset in itertools.combinations(points, t + 1):
        assert lagrange_at_zero(list(subset), t) == poly(0)
    # extra consistent points do not change the answer
    assert lagrange_at_zero(points, t) == poly(0)


def test_interpolate_roundtrip():
    poly = Poly((5, 0, 7, 1))
    pts = [(x, poly(x)) for x in (1, 2, 3, 4)]
    assert interpolate(pts) == poly


def test_bw_zero_errors_matches_lagrange():
    poly = Poly((0x11, 0x22))
    pts = [(x, poly(x)) for x in (1, 2, 3)]
    assert berlekamp_welch(pts, t=1, v=0) == interpolate(pts[:2])


def test_bw_one_corruption():
    poly = Poly((0x42, 0x99))
    pts = [(x, poly(x)) for x in (1, 2, 3, 4)]
    pts[2] = (pts[2][0], pts[2][1] ^ 0x5A)
    assert berlekamp_welch(pts, t=1, v=1) == poly


def test_bw_too_many_corruptions_rejected():
    poly = Poly((0x42, 0x99))
    xs = (1, 2, 3, 4)
    rng = random.Random(3)
    for _ in range(200):
        pts = [(x, poly(x)) for x in xs]
        for i in rng.sample(range(4), 2):
            pts[i] = (pts[i][0], pts[i][1] ^ rng.randrange(1, 256))
        try:
            got = berlekamp_welch(pts, t=1, v=1)
        except DecodeError:
            continue
        # Anything returned must still be within the error budget.
        assert sum(got(x) != y for x, y in pts) <= 1
        assert got != poly


def test_bw_random_trials():
    rng = random.Random(11)
    for _ in range(1000):
        t = rng.randint(1, 3)
        v = rng.randint(1, 2)
        k = t + 2 * v + 1 + rng.randint(0, 2)
        poly = Poly(tuple(rng.randrange(256) for _ in range(t + 1)))
        xs = rng.sample(range(1, 256), k)
        pts = [(x, poly(x)) for x in xs]
        for i in rng.sample(range(k), v):
            pts[i] = (pts[i][0], pts[i][1] ^ rng.randrange(1, 256))
        assert berlekamp_welch(pts, t, v).coeffs == poly.coeffs


def test_bw_insufficient_points():
    with pytest.raises(InsufficientSharesError):
        berlekamp_welch([(1, 1), (2, 2), (3, 3)], t=1, v=1)


def test_vec_mat_mul_matches_scalar_loop():
    rng = np.random.default_rng(0)
    vec = rng.integers(0, 256, 9, dtype=np.uint8)
    mat = rng.integers(0, 256, (9, 5), dtype=np.uint8)
    expected = []
    for c in range(5):
        acc = 0
        for j in range(9):
            acc ^= slow_mul(int(vec[j]), int(mat[j, c]))
        expected.append(acc)
    assert vec_mat_mul(vec, mat).tolist() == expected
