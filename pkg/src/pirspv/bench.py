"""Benchmark harness: run BIP-37, PIR (1 and 3 servers), C-PIR and Naive SPV
over sampled transactions and write histogram, CDF and summary CSVs.

Bandwidth is payload bytes.  PIR counts both the client's queries and the
servers' answers; BIP-37 and Naive count only what the peer sends back.
Header sync is excluded from every protocol.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import random
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .baselines import DEFAULT_FP_RATE, ChainIndex, bip37_bandwidth, naive_bandwidth
from .builder import AddressEntry, BuildResult, build_all
from .chain import Block, read_chain
from .client import ClientSession, LoopbackConnection, TcpConnection
from .database import Kind, Period
from .itpir import PirParams
from .manifest import slice_rect
from .server import PirService, ServerConfig, start_background
from .synth import SyntheticConfig, generate_synthetic_chain

log = logging.getLogger(__name__)

PROTOCOLS = ("bip37", "pir1", "pir3", "cpir", "naive")
PIR_PROTOCOLS = {"pir1": 1, "pir3": 3}
HISTOGRAM_FIELDS = ("protocol", "period", "txid", "bytes")
CDF_FIELDS = ("protocol", "period", "n_txs", "bytes_mean", "bytes_std", "latency_s")
TABLE_FIELDS = ("protocol", "period", "n_records", "bytes_mean", "bytes_std", "latency_s_mean")

# (num_rows, row_width) of the nine databases built from the 2018 mainnet
# snapshot at block 513502, per (kind, period).
MAINNET_2018_SHAPES = {
    (Kind.ADDRESS, Period.ALLTIME): (56172, 906 * 62),
    (Kind.ADDRESS, Period.MONTHLY): (13268, 214 * 62),
    (Kind.ADDRESS, Period.WEEKLY): (7688, 124 * 62),
    (Kind.MERKLE, Period.ALLTIME): (394080, 821 * 32),
    (Kind.MERKLE, Period.MONTHLY): (38272, 1196 * 32),
    (Kind.MERKLE, Period.WEEKLY): (37888, 1184 * 32),
    (Kind.TRANSACTION, Period.ALLTIME): (20942782, 758),
    (Kind.TRANSACTION, Period.MONTHLY): (1537424, 848),
    (Kind.TRANSACTION, Period.WEEKLY): (512460, 876),
}


class BenchError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    """What to run.  ``chain_file`` (JSON lines) wins over ``synthetic``."""

    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    chain_file: str | None = None
    periods: tuple[str, ...] = ("weekly", "monthly", "alltime")
    protocols: tuple[str, ...] = ("bip37", "pir1", "pir3", "naive")
    sample_counts: tuple[int, ...] = (1, 2, 5, 10)
    repetitions: int = 5
    fp_rate: float = DEFAULT_FP_RATE
    t: int = 1
    seed: int = 0
    sampling: str = "entries"  # or "addresses"
    transport: str = "loopback"  # or "tcp"
    include_overhead: bool = False
    measure_latency: bool = True
    cpir_bits: int = 1024

    def validate(self) -> None:
        if self.repetitions < 1:
            raise BenchError("repetitions must be >= 1")
        if not self.sample_counts or min(self.sample_counts) < 1:
            raise BenchError("sample counts must be positive")
        unknown = set(self.protocols) - set(PROTOCOLS)
        if unknown:
            raise BenchError(f"unknown protocols: {sorted(unknown)}")
        for p in self.periods:
            _period(p)
        if self.sampling not in ("entries", "addresses"):
            raise BenchError(f"unknown sampling mode {self.sampling!r}")
        if self.transport not in ("loopback", "tcp"):
            raise BenchError(f"unknown transport {self.transport!r}")
        if "pir3" in self.protocols and not 0 <= self.t < 3:
            raise BenchError("pir3 needs 0 <= t < 3")

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        synth = obj.pop("synthetic", {}) or {}
        for k in ("txs_per_block", "outputs_per_tx", "inputs_per_tx"):
            if k in synth:
                synth[k] = tuple(synth[k])
        for k in ("periods", "protocols", "sample_counts"):
            if k in obj:
                obj[k] = tuple(obj[k])
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - known
        if extra:
            raise BenchError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(synthetic=SyntheticConfig(**synth), **obj)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class BenchRecord:
    """Cost of verifying one sampled transaction with one protocol."""

    protocol: str
    period: str
    repetition: int
    txid: str
    bytes: int
    latency_s: float = 0.0


def _period(slug: str) -> Period:
    for p in Period:
        if p.slug == slug:
            return p
    raise BenchError(f"unknown period {slug!r}")


def load_chain(config: ExperimentConfig) -> list[Block]:
    if config.chain_file:
        with open(config.chain_file) as fh:
            return read_chain(fh)
    blocks, _ = generate_synthetic_chain(config.synthetic)
    return blocks


def period_entries(build: BuildResult, period: Period) -> list[AddressEntry]:
    """Every entry of a period's Address database, read straight from the matrix."""
    db = build.databases[(Kind.ADDRESS, period)]
    out = []
    for rec in build.manifests[(Kind.ADDRESS, period)]:
        blob = slice_rect(db, rec.rect, db.item_unit)
        out.extend(AddressEntry.parse(blob[i : i + 62]) for i in range(0, len(blob), 62))
    return out


def sample_entries(entries: Sequence[AddressEntry], n: int, rng: random.Random,
                   mode: str = "entries") -> list[AddressEntry]:
    """Draw up to ``n`` distinct entries, uniformly over entries or over addresses."""
    if mode == "entries":
        return rng.sample(list(entries), min(n, len(entries)))
    by_addr: dict[bytes, list[AddressEntry]] = {}
    for e in entries:
        by_addr.setdefault(e.address_payload, []).append(e)
    keys = sorted(by_addr)
    picked: list[AddressEntry] = []
    while keys and len(picked) < n:
        k = rng.choice(keys)
        pool = by_addr[k]
        picked.append(pool.pop(rng.randrange(len(pool))))
        if not pool:
            keys.remove(k)
    return picked


class _Servers:
    """In-process services, reached by loopback or over localhost TCP."""

    def __init__(self, build: BuildResult, n: int, transport: str):
        self.services = [PirService(build, ServerConfig(server_index=i)) for i in range(n)]
        self.tcp = [start_background(s) for s in self.services] if transport == "tcp" else []

    def connect(self, n: int):
        if self.tcp:
            return [TcpConnection(*s.address) for s in self.tcp[:n]]
        return [LoopbackConnection(s) for s in self.services[:n]]

    def close(self) -> None:
        for s in self.tcp:
            s.kill()


def _pir_session(servers: _Servers, protocol: str, config: ExperimentConfig, seed: int) -> ClientSession:
    if protocol == "cpir":
        session = ClientSession(servers.connect(1), backend="cpir", seed=seed,
                                security_bits=config.cpir_bits)
    else:
        ell = PIR_PROTOCOLS[protocol]
        t = min(config.t, ell - 1)
        session = ClientSession(servers.connect(ell), PirParams(ell=ell, t=t, k=ell), seed=seed)
    return session.initialize()


def pir_entry_cost(session: ClientSession, entry: AddressEntry, period: Period,
                   overhead: bool = False) -> tuple[int, float]:
    """Bytes and seconds for the three private rounds behind one entry."""
    before = session.pir_bytes(overhead)
    t0 = time.perf_counter()
    entries = session.query_address(entry.address, period)
    if entry not in entries:
        raise BenchError(f"address round lost entry {entry.txid.hex()}:{entry.vout_index}")
    session.query_merkle(entry.block_height, period)
    session.query_transaction(entry.txid, period)
    return session.pir_bytes(overhead) - before, time.perf_counter() - t0


def run_records(config: ExperimentConfig, blocks: Sequence[Block] | None = None,
                build: BuildResult | None = None) -> list[BenchRecord]:
    config.validate()
    if blocks is None:
        blocks = load_chain(config)
    if build is None:
        build = build_all(blocks)
    index = ChainIndex(blocks)
    n_servers = 3 if "pir3" in config.protocols else 1
    servers = _Servers(build, n_servers, config.transport)
    sessions: dict[str, ClientSession] = {}
    records: list[BenchRecord] = []
    max_n = max(config.sample_counts)
    try:
        for slug in config.periods:
            period = _period(slug)
            entries = period_entries(build, period)
            for rep in range(config.repetitions):
                rng = random.Random(f"{config.seed}:{slug}:{rep}")
                sample = sample_entries(entries, max_n, rng, config.sampling)
                tweaks = [rng.getrandbits(32) for _ in sample]
                for protocol in config.protocols:
                    if protocol in ("pir1", "pir3", "cpir") and protocol not in sessions:
                        sessions[protocol] = _pir_session(servers, protocol, config, config.seed + 1)
                    for entry, tweak in zip(sample, tweaks):
                        if protocol == "bip37":
                            b, lat = bip37_bandwidth(entry.txid, blocks, config.fp_rate, tweak,
                                                     index=index), 0.0
                        elif protocol == "naive":
                            b, lat = naive_bandwidth(entry.txid, blocks, index), 0.0
                        else:
                            b, lat = pir_entry_cost(sessions[protocol], entry, period,
                                                    config.include_overhead)
                        if not config.measure_latency:
                            lat = 0.0
                        records.append(BenchRecord(protocol, slug, rep, entry.txid.hex(), b, lat))
    finally:
        for s in sessions.values():
            s.close()
        servers.close()
    return records


# --- aggregation -------------------------------------------------------------


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    return statistics.fmean(values), statistics.pstdev(values)


def _groups(records: Iterable[BenchRecord]) -> dict[tuple[str, str], list[BenchRecord]]:
    out: dict[tuple[str, str], list[BenchRecord]] = {}
    for r in records:
        out.setdefault((r.protocol, r.period), []).append(r)
    return out


def cdf_rows(records: Sequence[BenchRecord], sample_counts: Sequence[int]) -> list[dict]:
    """Cumulative cost of the first ``k`` sampled txs, averaged over repetitions."""
    rows = []
    for (protocol, period), recs in _groups(records).items():
        reps: dict[int, list[BenchRecord]] = {}
        for r in recs:
            reps.setdefault(r.repetition, []).append(r)
        for k in sorted(sample_counts):
            totals = [sum(r.bytes for r in rs[:k]) for rs in reps.values() if len(rs) >= k]
            lats = [sum(r.latency_s for r in rs[:k]) for rs in reps.values() if len(rs) >= k]
            if not totals:
                continue
            mean, std = _mean_std(totals)
            rows.append({"protocol": protocol, "period": period, "n_txs": k,
                         "bytes_mean": mean, "bytes_std": std, "latency_s": statistics.fmean(lats)})
    return rows


def report_tables(records: Sequence[BenchRecord], protocols: Sequence[str] | None = None,
                  periods: Sequence[str] | None = None) -> list[dict]:
    """Per protocol x period mean/std of single-transaction bandwidth.

    Cells with no records are kept with ``n_records = 0`` so the grid is
    complete.
    """
    groups = _groups(records)
    protocols = list(protocols) if protocols is not None else sorted({r.protocol for r in records})
    periods = list(periods) if periods is not None else sorted({r.period for r in records})
    rows = []
    for protocol in protocols:
        for period in periods:
            recs = groups.get((protocol, period), [])
            mean, std = _mean_std([r.bytes for r in recs])
            lat = statistics.fmean(r.latency_s for r in recs) if recs else float("nan")
            rows.append({"protocol": protocol, "period": period, "n_records": len(recs),
                         "bytes_mean": mean, "bytes_std": std, "latency_s_mean": lat})
    return rows


def format_tables(rows: Sequence[dict]) -> str:
    lines = [f"{'protocol':<8} {'period':<8} {'n':>5} {'mean bytes':>14} {'std bytes':>14}"]
    for r in rows:
        lines.append(f"{r['protocol']:<8} {r['period']:<8} {r['n_records']:>5} "
                     f"{r['bytes_mean']:>14.1f} {r['bytes_std']:>14.1f}")
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if v != v else repr(round(v, 6))
    return str(v)


def _write_csv(path: Path, fields: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in fields])
    path.write_text(buf.getvalue())


def write_outputs(records: Sequence[BenchRecord], config: ExperimentConfig, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / f"{name}.csv" for name in ("histogram", "cdf", "tables")}
    _write_csv(paths["histogram"], HISTOGRAM_FIELDS,
               ({"protocol": r.protocol, "period": r.period, "txid": r.txid, "bytes": r.bytes}
                for r in records))
    _write_csv(paths["cdf"], CDF_FIELDS, cdf_rows(records, config.sample_counts))
    _write_csv(paths["tables"], TABLE_FIELDS, report_tables(records, config.protocols, config.periods))
    return paths


def run_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict[str, Path]:
    records = run_records(config)
    paths = write_outputs(records, config, Path(out_dir))
    log.info("\n%s", format_tables(report_tables(records, config.protocols, config.periods)))
    return paths


# --- analytic model ----------------------------------------------------------


def analytic_pir_bytes(shapes: dict[tuple[Kind, Period], tuple[int, int]], period: Period,
                       ell: int, rows: tuple[int, int, int] = (1, 1, 1)) -> int:
    """Payload bytes for one verification: ``rows`` fetched per round, ``ell`` servers."""
    total = 0
    for kind, n in zip(Kind, rows):
        num_rows, width = shapes[(kind, period)]
        total += n * ell * (num_rows + width)
    return total
