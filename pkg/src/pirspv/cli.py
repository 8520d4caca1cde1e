"""Command line: generate, build, serve, query, bench."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import cpir
from .bench import ExperimentConfig, format_tables, report_tables, run_records, write_outputs
from .builder import build_all
from .chain import read_chain, write_chain
from .client import ClientSession, connect
from .itpir import PirParams
from .server import ServerConfig, serve
from .synth import SyntheticConfig, generate_synthetic_chain
from .wire import Backend

log = logging.getLogger("pirspv")

STATS_FIELDS = ("address", "period", "block_height", "txid", "vout", "verified", "reason",
                "address_bytes", "merkle_bytes", "transaction_bytes", "bandwidth_bytes",
                "latency_s")


def _pair(text: str) -> tuple[int, int]:
    lo, _, hi = text.partition(",")
    return int(lo), int(hi or lo)


def _listen(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_generate(args) -> int:
    cfg = SyntheticConfig(
        n_blocks=args.blocks,
        n_addresses=args.addresses,
        txs_per_block=args.txs_per_block,
        outputs_per_tx=args.outputs_per_tx,
        inputs_per_tx=args.inputs_per_tx,
        spend_probability=args.spend_probability,
        seed=args.seed,
    )
    blocks, utxos = generate_synthetic_chain(cfg)
    with open(args.out, "w") as fh:
        write_chain(blocks, fh)
    log.info("wrote %d blocks (%d UTXOs) to %s", len(blocks), len(utxos), args.out)
    return 0


def cmd_build(args) -> int:
    with open(args.chain) as fh:
        blocks = read_chain(fh)
    result = build_all(blocks)
    result.save(Path(args.data_dir))
    for (kind, period), db in sorted(result.databases.items()):
        log.info("%s-%s: %d rows x %d bytes, %d manifest records", kind.slug, period.slug,
                 db.num_rows, db.row_width, len(result.manifests[(kind, period)]))
    return 0


def cmd_serve(args) -> int:
    host, port = _listen(args.listen)
    backends = frozenset(Backend[b.upper()] for b in args.backends.split(","))
    serve(ServerConfig(Path(args.data_dir), host, port, args.server_index, backends, args.max_frame))
    return 0


def cmd_query(args) -> int:
    endpoints = [s for s in args.servers.split(",") if s]
    conns = connect(endpoints)
    params = None
    if args.backend == "itpir" or (args.backend == "auto" and len(conns) > 1):
        params = PirParams(ell=len(conns), t=args.t, k=len(conns), v=args.v)
    session = ClientSession(conns, params, backend=args.backend, seed=args.seed,
                            security_bits=args.security_bits)
    with session:
        session.initialize()
        results = session.pir_spv(args.address, args.min_conf)
    rows = []
    for r in results:
        rows.append({
            "address": r.address,
            "period": r.period.slug,
            "block_height": r.block_height,
            "txid": r.entry.txid.hex() if r.entry else "",
            "vout": r.entry.vout_index if r.entry else "",
            "verified": int(r.verified),
            "reason": r.reason,
            **{f"{name}_bytes": r.rounds[name].bytes if name in r.rounds else 0
               for name in ("address", "merkle", "transaction")},
            "bandwidth_bytes": r.bandwidth_bytes,
            "latency_s": round(r.latency_seconds, 6),
        })
        status = "OK  " if r.verified else "FAIL"
        print(f"{status} {r.period.slug:<8} height={r.block_height} "
              f"txid={rows[-1]['txid']} bytes={r.bandwidth_bytes} {r.reason}")
    if not results:
        print(f"no unspent outputs found for {args.address}")
    if args.stats_out:
        with open(args.stats_out, "w", newline="") as fh:
            w = csv.DictWriter(fh, STATS_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0 if all(r.verified for r in results) else 1


def cmd_bench(args) -> int:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        config.seed = args.seed
    records = run_records(config)
    write_outputs(records, config, Path(args.out_dir))
    print(format_tables(report_tables(records, config.protocols, config.periods)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pirspv", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic chain as JSON lines")
    g.add_argument("--out", required=True)
    g.add_argument("--blocks", type=int, default=6048)
    g.add_argument("--addresses", type=int, default=50)
    g.add_argument("--txs-per-block", type=_pair, default=(0, 3), metavar="LO,HI")
    g.add_argument("--outputs-per-tx", type=_pair, default=(1, 3), metavar="LO,HI")
    g.add_argument("--inputs-per-tx", type=_pair, default=(1, 2), metavar="LO,HI")
    g.add_argument("--spend-probability", type=float, default=0.8)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("build", help="build the nine databases and manifests")
    b.add_argument("--chain", required=True)
    b.add_argument("--data-dir", required=True)
    b.set_defaults(func=cmd_build)

    s = sub.add_parser("serve", help="run a PIR server")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--listen", default="127.0.0.1:7300", metavar="HOST:PORT")
    s.add_argument("--server-index", type=int, default=0,
                   help="0-based; the server evaluates query shares at index+1")
    s.add_argument("--backends", default="itpir,cpir")
    s.add_argument("--max-frame", type=int, default=64 * 1024 * 1024)
    s.set_defaults(func=cmd_serve)

    q = sub.add_parser("query", help="privately fetch and verify an address's UTXOs")
    q.add_argument("--servers", required=True, metavar="HOST:PORT,...",
                   help="listed in server-index order")
    q.add_argument("--t", type=int, default=1)
    q.add_argument("--v", type=int, default=0, help="Byzantine responses to correct")
    q.add_argument("--backend", choices=("auto", "itpir", "cpir", "naive"), default="auto",
                   help="auto: C-PIR for one server, IT-PIR for several")
    q.add_argument("--address", required=True)
    q.add_argument("--min-conf", type=int, default=6)
    q.add_argument("--stats-out")
    q.add_argument("--seed", type=int, default=None,
                   help="fixes query randomness; leave unset for real privacy")
    q.add_argument("--security-bits", type=int, default=cpir.DEFAULT_SECURITY_BITS)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("bench", help="run an experiment and write CSVs")
    e.add_argument("--config")
    e.add_argument("--out-dir", required=True)
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
