import random

import numpy as np
import pytest
from scipy import stats

from pirspv import cpir
from pirspv.database import Kind, Period, PirDatabase
from pirspv.field import DecodeError, InsufficientSharesError
from pirspv.itpir import (
    ItPirQuery,
    PirParams,
    ProtocolError,
    itpir_compute,
    itpir_cost,
    itpir_decode,
    itpir_gen_queries,
)
from pirspv.pir import (
    LocalCpir,
    LocalItPir,
    LocalTrivial,
    corrupt_server,
    drop_servers,
    fetch_rows,
    trivial_fetch,
)


def random_db(rows, cols, seed=0):
    rng = np.random.default_rng(seed)
    return PirDatabase(Kind.TRANSACTION, Period.WEEKLY, rng.integers(0, 256, (rows, cols), dtype=np.uint8), 1)


@pytest.fixture(scope="module")
def small_key():
    return cpir.CpirKey.generate(512, seed=1)


def test_query_shape():
    qs = itpir_gen_queries(2, (4, 4), PirParams.for_servers(3, t=1), rng_seed=1)
    assert len(qs) == 3
    assert all(q.shares.shape == (4,) for q in qs)


def test_query_row_out_of_range():
    with pytest.raises(ValueError):
        itpir_gen_queries(4, (4, 4), PirParams.for_servers(3), rng_seed=1)


def test_params_validation():
    with pytest.raises(ValueError):
        PirParams(ell=3, t=3, k=3)
    with pytest.raises(ValueError):
        PirParams(ell=4, t=1, k=4, v=2)
    with pytest.raises(ValueError):
        PirParams(ell=2, t=1, k=2, alphas=(1, 1))
    assert PirParams.for_servers(4, t=1, v=1).alphas == (1, 2, 3, 4)


def test_honest_decode_every_row():
    db = random_db(8, 8)
    params = PirParams.for_servers(3, t=1)
    for i in range(8):
        qs = itpir_gen_queries(i, db.shape, params, rng_seed=i)
        rs = [itpir_compute(q, db) for q in qs]
        assert itpir_decode(rs, params) == db.row(i)
        # any two of three suffice
        assert itpir_decode(rs[1:], params) == db.row(i)
        assert itpir_decode([rs[0], rs[2]], params) == db.row(i)


def test_decode_too_few():
    db = random_db(8, 8)
    params = PirParams.for_servers(3, t=2)
    rs = [itpir_compute(q, db) for q in itpir_gen_queries(0, db.shape, params, 1)]
    with pytest.raises(InsufficientSharesError):
        itpir_decode(rs[:2], params)


def test_compute_linearity_and_basis():
    db = random_db(6, 5, seed=3)
    zero = itpir_compute(ItPirQuery(0, np.zeros(6, np.uint8)), db)
    assert not zero.data.any()
    for j in range(6):
        e = np.zeros(6, np.uint8)
        e[j] = 1
        assert itpir_compute(ItPirQuery(0, e), db).data.tobytes() == db.row(j)
    rng = np.random.default_rng(9)
    for _ in range(50):
        q1 = rng.integers(0, 256, 6, dtype=np.uint8)
        q2 = rng.integers(0, 256, 6, dtype=np.uint8)
        lhs = itpir_compute(ItPirQuery(0, q1 ^ q2), db).data
        rhs = itpir_compute(ItPirQuery(0, q1), db).data ^ itpir_compute(ItPirQuery(0, q2), db).data
        assert np.array_equal(lhs, rhs)


def test_compute_length_mismatch():
    with pytest.raises(ProtocolError):
        itpir_compute(ItPirQuery(0, np.zeros(3, np.uint8)), random_db(4, 4))


def test_byzantine_correction():
    db = random_db(8, 8, seed=4)
    params = PirParams.for_servers(4, t=1, v=1)
    rng = random.Random(0)
    for i in range(8):
        backend = LocalItPir(db, params, seed=i, fault=corrupt_server(rng.randrange(4), rng))
        assert backend.fetch_row(i) == db.row(i)


def test_byzantine_beyond_budget_detected():
    db = random_db(8, 8, seed=4)
    params = PirParams.for_servers(4, t=1, v=1)
    rng = random.Random(1)
    rs = [itpir_compute(q, db) for q in itpir_gen_queries(3, db.shape, params, 2)]
    for s in (0, 1):
        rs[s].data[:] ^= np.array([rng.randrange(1, 256) for _ in range(8)], np.uint8)
    try:
        row = itpir_decode(rs, params)
    except DecodeError:
        return
    assert row != db.row(3)


def test_drop_one_server():
    db = random_db(8, 8, seed=5)
    params = PirParams(ell=3, t=1, k=2)
    for dropped in range(3):
        backend = LocalItPir(db, params, seed=dropped, fault=drop_servers([dropped]))
        assert fetch_rows((0, 7), backend) == db.payload


def test_single_server_share_uniform():
    params = PirParams.for_servers(2, t=1)
    rng = np.random.default_rng(0)
    counts = np.zeros((4, 256), dtype=np.int64)
    for _ in range(10_000):
        q = itpir_gen_queries(1, (4, 4), params, rng)[0]
        counts[np.arange(4), q.shares] += 1
    for j in range(4):
        assert stats.chisquare(counts[j]).pvalue > 0.01


def test_cpir_roundtrip_every_row(small_key):
    db = random_db(4, 4, seed=6)
    backend = LocalCpir(db, small_key, seed=3)
    for i in range(4):
        assert backend.fetch_row(i) == db.row(i)


def test_cpir_sizes_uniform(small_key):
    db = random_db(16, 16, seed=7)
    sizes, resp_sizes = set(), set()
    for i in range(16):
        q, state = cpir.cpir_gen_query(i, db.shape, key=small_key, rng_seed=i)
        sizes.add(q.size)
        r = cpir.cpir_compute(q, db)
        resp_sizes.add(r.size)
        assert cpir.cpir_decode(r, state) == db.row(i)
    assert sizes == {cpir.query_size(16, 512)}
    assert resp_sizes == {cpir.response_size(16, 512)}
    # one constant expansion factor for the whole database
    assert len({s / db.row_width for s in resp_sizes}) == 1


def test_cpir_multi_chunk_rows(small_key):
    db = random_db(3, 150, seed=8)
    backend = LocalCpir(db, small_key, seed=4)
    for i in range(3):
        assert backend.fetch_row(i) == db.row(i)


def test_cpir_malformed(small_key):
    db = random_db(4, 4)
    q, state = cpir.cpir_gen_query(0, db.shape, key=small_key, rng_seed=1)
    with pytest.raises(ProtocolError):
        cpir.cpir_compute(cpir.CpirQuery(q.blob[:-1]), db)
    with pytest.raises(ProtocolError):
        cpir.cpir_compute(q, random_db(5, 4))
    r = cpir.cpir_compute(q, db)
    with pytest.raises(ProtocolError):
        cpir.cpir_decode(cpir.CpirResponse(r.blob + b"\x00"), state)


def test_trivial_fetch():
    db = random_db(4, 4)
    backend = LocalTrivial(db)
    assert len(trivial_fetch(db)) == 16
    assert fetch_rows((0, 3), backend) == db.payload
    assert backend.counter.received == 16


def test_fetch_rows_ranges_and_cost():
    db = random_db(8, 8, seed=2)
    params = PirParams.for_servers(3, t=1)
    backend = LocalItPir(db, params, seed=0)
    assert fetch_rows((2, 2), backend) == db.row(2)
    backend.counter.reset()
    got = fetch_rows((0, 2), backend)
    assert len(got) == 24 and got == db.payload[:24]
    assert backend.counter.total == itpir_cost(3, db.shape, 3) == 3 * 3 * (8 + 8)
    with pytest.raises(ValueError):
        fetch_rows((3, 8), backend)


def test_database_file_roundtrip(tmp_path):
    db = random_db(5, 7)
    path = tmp_path / "x.pirdb"
    db.save(path)
    back = PirDatabase.load(path)
    assert back.payload == db.payload and back.shape == (5, 7)
    raw = path.read_bytes()
    assert raw[:6] == b"PIRDB\x01"
    assert raw[6:17] == bytes([2, 0]) + (7).to_bytes(4, "little") + (5).to_bytes(4, "little") + bytes([1])
