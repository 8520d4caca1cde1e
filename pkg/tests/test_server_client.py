import dataclasses
import json
import struct

import numpy as np
import pytest

from pirspv.builder import build_all, build_database
from pirspv.chain import ChainError, Transaction, merkle_root
from pirspv.client import (
    ClientSession,
    IntegrityError,
    LoopbackConnection,
    NotFound,
    TcpConnection,
)
from pirspv.database import Kind, Period
from pirspv.itpir import PirParams, itpir_compute, itpir_gen_queries
from pirspv.manifest import slice_rect
from pirspv.server import PirService, ServerConfig, start_background
from pirspv.synth import SyntheticConfig, generate_synthetic_chain
from pirspv.wire import (
    HEADER_SIZE,
    Backend,
    ErrorCode,
    MsgType,
    ServerError,
    db_request,
    encode_frame,
    pir_query_payload,
    read_frame,
)


@pytest.fixture(scope="module")
def chain():
    return generate_synthetic_chain(SyntheticConfig(n_blocks=80, n_addresses=15, seed=9))


@pytest.fixture(scope="module")
def build(chain):
    return build_all(chain[0])


def services(build, n, **kw):
    return [PirService(build, ServerConfig(server_index=i), **kw) for i in range(n)]


def loopback_session(build, n=3, t=1, v=0, seed=1, **kw):
    svcs = services(build, n)
    conns = [LoopbackConnection(s) for s in svcs]
    params = PirParams(ell=n, t=t, k=n, v=v)
    return ClientSession(conns, params, seed=seed, **kw).initialize(), svcs


def ground_truth(utxos):
    out = {}
    for u in utxos:
        out.setdefault(u.hash160, set()).add((u.txid, u.vout, u.height))
    return out


# --- server ------------------------------------------------------------------


def test_db_meta_on_table_one_shape(build):
    db, _ = build_database(Kind.ADDRESS, Period.WEEKLY, [("x", b"\x01" * 62)], (7688, 7688))
    big = type(build)(dict(build.databases), dict(build.manifests), build.headers)
    big.databases[(Kind.ADDRESS, Period.WEEKLY)] = db
    svc = PirService(big, ServerConfig(server_index=2))
    resp_type, raw = svc.handle(MsgType.GET_DB_META, db_request(Kind.ADDRESS, Period.WEEKLY))
    assert resp_type == MsgType.GET_DB_META | 0x80
    meta = json.loads(raw)
    assert (meta["row_width"], meta["num_rows"]) == (7688, 7688)
    assert meta["alpha"] == 3 and meta["item_unit"] == 62


def test_tcp_errors_keep_connection_open(build):
    server = start_background(PirService(build))
    try:
        conn = TcpConnection(*server.address)
        with pytest.raises(ServerError) as err:
            conn.request(MsgType.PIR_QUERY, pir_query_payload(0, 0, Backend.ITPIR, b"\x00" * 3))
        assert err.value.code == ErrorCode.PROTOCOL
        with pytest.raises(ServerError) as err:
            conn.request(0x42, b"")
        assert err.value.code == ErrorCode.UNKNOWN_TYPE
        # still usable afterwards
        assert conn.request(MsgType.GET_MANIFEST, db_request(0, 0)) == build.manifests[(Kind.ADDRESS, Period.WEEKLY)].to_json()
        conn.close()
    finally:
        server.kill()


def test_oversized_frame_closes_connection(build):
    svc = PirService(build, ServerConfig(max_frame=1024))
    server = start_background(svc)
    try:
        conn = TcpConnection(*server.address)
        conn.sock.sendall(struct.pack("<IB", 4096, MsgType.PIR_QUERY))
        assert conn.sock.recv(16) == b""
        conn.close()
    finally:
        server.kill()


def test_two_servers_same_manifest_bytes(build, tmp_path):
    build.save(tmp_path)
    a = PirService.from_config(ServerConfig(data_dir=tmp_path, server_index=0))
    b = PirService.from_config(ServerConfig(data_dir=tmp_path, server_index=1))
    for kind in Kind:
        for period in Period:
            req = db_request(kind, period)
            assert a.handle(MsgType.GET_MANIFEST, req) == b.handle(MsgType.GET_MANIFEST, req)


def test_byte_accounting_over_tcp(build):
    svc = PirService(build)
    server = start_background(svc)
    try:
        conn = TcpConnection(*server.address)
        db = build.databases[(Kind.ADDRESS, Period.WEEKLY)]
        r, w = db.shape
        q = itpir_gen_queries(0, db.shape, PirParams(ell=1, t=0, k=1), 3)[0]
        conn.request(MsgType.PIR_QUERY, pir_query_payload(0, 0, Backend.ITPIR, q.to_bytes()))
        conn.request(MsgType.GET_FULL_DB, db_request(0, 0))
        conn.close()
        server.shutdown()
        stats = svc.sessions[-1]
        assert stats.total("received", MsgType.PIR_QUERY) == r
        assert stats.total("received", MsgType.PIR_QUERY, overhead=True) == r + HEADER_SIZE + 3
        assert stats.total("sent", MsgType.PIR_QUERY) == w
        assert stats.total("sent", MsgType.PIR_QUERY, overhead=True) == w + HEADER_SIZE
        assert stats.total("sent", MsgType.GET_FULL_DB) == r * w
        assert conn.stats.as_dict() == {"sent": stats.as_dict()["received"], "received": stats.as_dict()["sent"]}
    finally:
        server.kill()


def test_sessions_are_isolated(build):
    svc = PirService(build)
    a, b = LoopbackConnection(svc), LoopbackConnection(svc)
    a.request(MsgType.GET_MANIFEST, db_request(0, 0))
    assert b.server_stats.total("sent") == 0
    a.server_stats.reset()
    assert a.server_stats.total("sent") == 0


def test_loopback_matches_in_process(build):
    svc = PirService(build, ServerConfig(server_index=1))
    db = build.databases[(Kind.TRANSACTION, Period.WEEKLY)]
    params = PirParams(ell=3, t=1, k=3)
    for row in range(db.num_rows):
        q = itpir_gen_queries(row, db.shape, params, row)[1]
        _, raw = svc.handle(MsgType.PIR_QUERY, pir_query_payload(2, 0, Backend.ITPIR, q.to_bytes()))
        assert raw == itpir_compute(q, db).to_bytes()


def test_raw_tcp_frame_layout(build):
    server = start_background(PirService(build))
    try:
        conn = TcpConnection(*server.address)
        conn.sock.sendall(encode_frame(MsgType.GET_HEADERS, struct.pack("<I", 79)))
        resp_type, payload = read_frame(conn.sock)
        assert resp_type == 0x82 and payload == build.headers[79].serialize()
        conn.close()
    finally:
        server.kill()


# --- client ------------------------------------------------------------------


def test_headers_and_accounting_categories(build):
    session, _ = loopback_session(build)
    assert len(session.headers) == len(build.headers)
    assert session.header_bytes() == len(build.headers) * 80 + HEADER_SIZE
    assert session.pir_bytes() == 0


def test_broken_header_chain_rejected(build):
    bad = type(build)(build.databases, build.manifests, list(build.headers))
    h = bad.headers[5]
    bad.headers[5] = dataclasses.replace(h, prev_hash=b"\x11" * 32)
    with pytest.raises(ChainError, match="broken link"):
        ClientSession([LoopbackConnection(PirService(bad))], PirParams(1, 0, 1)).initialize()


def test_address_merkle_transaction_rounds(chain, build):
    blocks, utxos = chain
    session, _ = loopback_session(build)
    truth = ground_truth(utxos)
    for period in Period:
        db = build.databases[(Kind.ADDRESS, period)]
        for rec in build.manifests[(Kind.ADDRESS, period)]:
            entries = session.query_address(rec.key, period)
            assert b"".join(e.serialize() for e in entries) == slice_rect(db, rec.rect, 62)
            assert [e.block_height for e in entries] == sorted(e.block_height for e in entries)
            h160 = entries[0].address_payload[1:21]
            assert {(e.txid, e.vout_index, e.block_height) for e in entries} <= truth[h160]
    assert session.query_address("1BoatSLRHtKNngkdXEeobR76b53LETtpyT", Period.WEEKLY) == []
    for b in blocks[-5:]:
        period = Period.WEEKLY
        txids = session.query_merkle(b.height, period)
        assert txids == b.txids and merkle_root(txids) == b.header.merkle_root
    longest = max((tx for b in blocks for tx in b.txs if tx.txid in utxos.unspent_txids()),
                  key=lambda tx: len(tx.serialize()))
    assert session.query_transaction(longest.txid, Period.WEEKLY) == longest.serialize()


def test_not_found_outside_partition():
    blocks, _ = generate_synthetic_chain(SyntheticConfig(n_blocks=1100, n_addresses=10, seed=3))
    build = build_all(blocks)
    session, _ = loopback_session(build)
    singles = [b for b in blocks[:92] if len(b.txs) == 1]
    txids = session.query_merkle(singles[0].height, Period.MONTHLY)
    assert txids == [singles[0].txs[0].txid]
    with pytest.raises(NotFound):
        session.query_merkle(0, Period.WEEKLY)


def test_tampered_row_raises_integrity_error(chain, build):
    blocks, utxos = chain
    tx = next(tx for b in blocks[-20:] for tx in b.txs if tx.txid in utxos.unspent_txids())
    rec = build.manifests[(Kind.TRANSACTION, Period.WEEKLY)].lookup(tx.txid.hex())

    def flip_first_byte(kind, period, row, data):
        if kind != Kind.TRANSACTION or row != rec.row_start:
            return data
        arr = bytearray(data)
        arr[rec.col_start] ^= 0xFF
        return bytes(arr)

    session, _ = loopback_session(build, row_tamper=flip_first_byte)
    with pytest.raises(IntegrityError):
        session.query_transaction(tx.txid, Period.WEEKLY)


def test_pir_spv_verifies_every_address(chain, build):
    blocks, utxos = chain
    session, _ = loopback_session(build)
    truth = ground_truth(utxos)
    from pirspv.base58 import encode_address

    for h160, outs in truth.items():
        results = session.pir_spv(encode_address(h160), min_confirmations=0)
        assert {(r.entry.txid, r.entry.vout_index, r.block_height) for r in results} == outs
        assert all(r.verified for r in results), [r.reason for r in results]
        tx = Transaction.parse(results[0].tx_bytes)
        assert tx.txid == results[0].entry.txid
        assert results[0].bandwidth_bytes > 0 and results[0].latency_seconds > 0


def test_min_confirmations_enforced(chain, build):
    blocks, utxos = chain
    session, _ = loopback_session(build)
    tip = [u for u in utxos if u.height == len(blocks) - 1][0]
    from pirspv.base58 import encode_address

    res = [r for r in session.pir_spv(encode_address(tip.hash160), 6) if r.block_height == tip.height]
    assert res and not any(r.verified for r in res)


def test_cost_model_per_round(chain, build):
    session, _ = loopback_session(build)
    _, utxos = chain
    from pirspv.base58 import encode_address

    u = next(iter(utxos))
    for r in session.pir_spv(encode_address(u.hash160), 0):
        for name, kind in zip(("address", "merkle", "transaction"), Kind):
            rs = r.rounds.get(name)
            if rs is None or rs.rows == 0:
                continue
            n_rows, width = build.databases[(kind, r.period)].shape
            assert rs.bytes == rs.rows * 3 * (n_rows + width)


def test_server_drop_mid_session(chain, build):
    _, utxos = chain
    from pirspv.base58 import encode_address

    addrs = sorted({encode_address(u.hash160) for u in utxos})
    reference, _ = loopback_session(build)
    expected = {a: [(r.entry, r.tx_bytes, r.verified) for r in reference.pir_spv(a, 0)] for a in addrs}
    for victim in range(3):
        session, _ = loopback_session(build, seed=victim + 10)
        for n, a in enumerate(addrs):
            if n == len(addrs) // 2:
                session.connections[victim].close()
            assert [(r.entry, r.tx_bytes, r.verified) for r in session.pir_spv(a, 0)] == expected[a]
        assert session.live.count(False) == 1


def test_server_kill_over_tcp(chain, build):
    _, utxos = chain
    from pirspv.base58 import encode_address

    servers = [start_background(s) for s in services(build, 3)]
    try:
        conns = [TcpConnection(*s.address) for s in servers]
        session = ClientSession(conns, PirParams(3, 1, 3), seed=4).initialize()
        addrs = sorted({encode_address(u.hash160) for u in utxos})[:6]
        before = [[(r.entry, r.verified) for r in session.pir_spv(a, 0)] for a in addrs[:3]]
        servers[1].kill()
        after = [[(r.entry, r.verified) for r in session.pir_spv(a, 0)] for a in addrs]
        assert after[:3] == before
        assert all(all(v for _, v in res) for res in after)
        assert session.live == [True, False, True]
    finally:
        for s in servers:
            s.kill()


def test_byzantine_server_corrected(chain, build):
    _, utxos = chain
    from pirspv.base58 import encode_address

    rng = np.random.default_rng(0)

    def garble(kind, period, backend, out):
        arr = bytearray(out)
        for i in rng.choice(len(arr), size=max(1, len(arr) // 4), replace=False):
            arr[i] ^= int(rng.integers(1, 256))
        return bytes(arr)

    svcs = services(build, 4)
    svcs[2].tamper = garble
    session = ClientSession([LoopbackConnection(s) for s in svcs], PirParams(4, 1, 4, v=1), seed=2)
    session.initialize()
    for h160 in sorted({u.hash160 for u in utxos})[:8]:
        results = session.pir_spv(encode_address(h160), 0)
        assert results and all(r.verified for r in results)


def test_client_and_server_counters_agree(chain, build):
    session, svcs = loopback_session(build)
    _, utxos = chain
    from pirspv.base58 import encode_address

    for h160 in sorted({u.hash160 for u in utxos})[:4]:
        session.pir_spv(encode_address(h160), 0)
    for conn in session.connections:
        assert conn.stats.sent == conn.server_stats.received
        assert conn.stats.received == conn.server_stats.sent


def test_naive_and_cpir_backends(chain, build):
    _, utxos = chain
    from pirspv.base58 import encode_address

    h160 = sorted({u.hash160 for u in utxos})[0]
    svc = PirService(build)
    for backend in ("naive", "cpir"):
        s = ClientSession([LoopbackConnection(svc)], backend=backend, seed=5, security_bits=512)
        s.initialize()
        results = s.pir_spv(encode_address(h160), 0)
        assert results and all(r.verified for r in results)
    with pytest.raises(ValueError):
        ClientSession([LoopbackConnection(svc)] * 2, backend="cpir")


def test_session_requires_enough_servers(build):
    with pytest.raises(ValueError):
        ClientSession([LoopbackConnection(PirService(build))], PirParams(3, 1, 3))


def test_auto_backend_routing(build):
    one = ClientSession([LoopbackConnection(PirService(build))], backend="auto")
    assert one.backend == "cpir"
    three = ClientSession([LoopbackConnection(s) for s in services(build, 3)], backend="auto")
    assert three.backend == "itpir" and three.params.t == 1
