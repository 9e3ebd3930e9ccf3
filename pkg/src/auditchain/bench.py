"""Benchmark harness with a brute-force oracle.

Every timed query is also checked against ``Oracle``, a linear scan over
the records in ingest order; a mismatch fails the run. Oracle time is
never inside a timed region.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import random
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .ledger import Chain
from .log_model import FIELDS, GeneratorSpec, LogRecord, encode_record, generate
from .net_sim import Network, NetworkConfig
from .query_engine import EngineConfig, Query, QueryResult, ScanStats


class Oracle:
    def __init__(self, records: Iterable[LogRecord] = ()):
        self.records: list[LogRecord] = list(records)

    def add(self, records: Iterable[LogRecord]) -> None:
        self.records.extend(records)

    def query(self, q: Query) -> list[LogRecord]:
        out = []
        for r in self.records:
            if q.range is not None and not (q.range[0] <= r.timestamp <= q.range[1]):
                continue
            if any(getattr(r, name) != value for name, value in q.equality.items()):
                continue
            out.append(r)
        if q.order_by is not None:
            name, direction = q.order_by
            out.sort(key=lambda r: getattr(r, name), reverse=direction == "desc")
        return out


def oracle_query(records: Sequence[LogRecord], q: Query) -> list[LogRecord]:
    return Oracle(records).query(q)


def results_match(got: Sequence[LogRecord], expected: Sequence[LogRecord], ordered: bool) -> bool:
    if ordered:
        return list(got) == list(expected)
    return Counter(got) == Counter(expected)


def linear_fit(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """(slope, intercept, r_squared) of the least-squares line."""
    slope, intercept = statistics.linear_regression(xs, ys)
    if len(set(ys)) == 1:
        return slope, intercept, 1.0
    return slope, intercept, statistics.correlation(xs, ys) ** 2


@dataclass
class Measurement:
    kind: str
    label: str
    x: float = 0.0
    seconds: float = 0.0
    records: int = 0
    transactions: int = 0
    chain_bytes: int = 0
    raw_bytes: int = 0
    plan: str = ""
    oracle_match: bool = True
    stats: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    rows: list[Measurement] = field(default_factory=list)
    fit: tuple[float, float, float] | None = None

    @property
    def passed(self) -> bool:
        return all(m.oracle_match for m in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f for f in Measurement.__dataclass_fields__ if f != "stats"]
        stat_names = list(ScanStats.__dataclass_fields__)
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names + stat_names)
        for m in self.rows:
            writer.writerow([getattr(m, n) for n in names] + [m.stats.get(s, "") for s in stat_names])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": [asdict(m) for m in self.rows], "fit": self.fit,
                           "passed": self.passed}, indent=2)

    def summary(self) -> str:
        lines = []
        for m in self.rows:
            extra = f" plan={m.plan}" if m.plan else ""
            lines.append(f"{m.kind:8s} {m.label:28s} n={m.records:<8d} {m.seconds * 1000:10.2f} ms"
                         f"{extra} oracle={'ok' if m.oracle_match else 'MISMATCH'}")
        if self.fit is not None:
            slope, intercept, r2 = self.fit
            lines.append(f"linear fit: slope={slope:.3e} s/record intercept={intercept:.3e} s R^2={r2:.4f}")
        return "\n".join(lines)


def node_records(node_id: int, count: int, seed: int = 0, **spec) -> list[LogRecord]:
    """Synthetic per-site file: the node field is pinned to the loading node."""
    fixed = {"node": node_id, **spec.pop("fixed", {})}
    return generate(GeneratorSpec(count, seed=seed * 1009 + node_id, fixed=fixed, **spec))


def load_network(per_node: dict[int, list[LogRecord]], cfg: NetworkConfig | None = None
                 ) -> tuple[Network, Oracle]:
    """Load each node's file in turn (final flush per file); oracle keeps the same order."""
    net = Network(cfg)
    oracle = Oracle()
    for node_id, records in per_node.items():
        net.ingest_many(node_id, records)
        net.flush(node_id)
        oracle.add(records)
    return net, oracle


def _tx_count(net: Network) -> int:
    """Transactions sealed after the layout block."""
    return sum(len(b.txs) for b in net.node(1).chain.blocks[2:])


def run_load_bench(sizes: Sequence[int], *, cfg: NetworkConfig | None = None, repeats: int = 1,
                   seed: int = 0) -> BenchReport:
    """Time loading ``size`` records into a fresh network, split evenly over the nodes.

    Repeats run in rounds over all sizes and the fastest time per size is kept.
    """
    cfg = cfg or NetworkConfig()
    inputs = {}
    for size in sizes:
        per_node = {}
        for node_id in range(1, cfg.node_count + 1):
            share = size // cfg.node_count + (1 if node_id <= size % cfg.node_count else 0)
            per_node[node_id] = node_records(node_id, share, seed)
        inputs[size] = per_node
    times: dict[int, list[float]] = {size: [] for size in sizes}
    shape: dict[int, tuple[int, int]] = {}
    for _ in range(repeats):
        for size, per_node in inputs.items():
            start = time.perf_counter()
            net, _ = load_network(per_node, cfg)
            times[size].append(time.perf_counter() - start)
            shape[size] = (_tx_count(net), net.node(1).chain.byte_size())
            del net
    report = BenchReport()
    for size in sizes:
        report.rows.append(Measurement(
            "load", f"size={size}", x=size, seconds=min(times[size]), records=size,
            transactions=shape[size][0], chain_bytes=shape[size][1]))
    if len(report.rows) >= 2:
        report.fit = linear_fit([m.x for m in report.rows], [m.seconds for m in report.rows])
    return report


def standard_queries() -> list[tuple[str, Query]]:
    """The four test-query shapes: range+eq, single eq, two eq, two eq ordered by time."""
    return [
        ("q1 user+range", Query({"user": 7}, (1522257730000, 1522449160000))),
        ("q2 resource", Query({"resource": "MOD_WormBase"})),
        ("q3 user+resource", Query({"user": 1, "resource": "TOPMed"})),
        ("q4 node+ref_id asc", Query({"node": 3, "ref_id": 40345}, None, ("timestamp", "asc"))),
    ]


def _timed_query(net: Network, node_id: int, q: Query) -> tuple[float, QueryResult]:
    # like timeit: keep collector pauses out of the timed region
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        start = time.perf_counter()
        result = net.query(node_id, q)
        return time.perf_counter() - start, result
    finally:
        if gc_was_enabled:
            gc.enable()


def run_query_bench(net: Network, oracle: Oracle, workload: Sequence[tuple[str, Query]], *,
                    node_id: int = 1, repeats: int = 1) -> BenchReport:
    report = BenchReport()
    for label, q in workload:
        times = []
        for _ in range(repeats):
            elapsed, result = _timed_query(net, node_id, q)
            times.append(elapsed)
        expected = oracle.query(q)
        report.rows.append(Measurement(
            "query", label, x=len(result.records), seconds=min(times), records=len(result.records),
            plan=result.plan, oracle_match=results_match(result.records, expected, q.order_by is not None),
            stats=asdict(result.stats)))
    return report


def run_retrieval_bench(sizes: Sequence[int], *, cfg: NetworkConfig | None = None, repeats: int = 3,
                        seed: int = 0) -> BenchReport:
    """Time an unrestricted (full-range) query against stores of each size.

    Every size gets its own store, loaded up front; the timing rounds then
    visit the sizes in turn so slow drift on the machine hits all of them.
    """
    records = node_records(1, max(sizes), seed)
    stores = []
    for size in sorted(sizes):
        net, oracle = load_network({1: records[:size]}, cfg)
        q = Query({}, (1, max((r.timestamp for r in oracle.records), default=1)))
        stores.append((size, net, oracle, q))
    times: dict[int, list[float]] = {size: [] for size, *_ in stores}
    results: dict[int, QueryResult] = {}
    for _ in range(repeats):
        for size, net, _, q in stores:
            elapsed, results[size] = _timed_query(net, 1, q)
            times[size].append(elapsed)
    report = BenchReport()
    for size, _, oracle, q in stores:
        result = results[size]
        report.rows.append(Measurement(
            "retrieve", f"all n={size}", x=len(result.records), seconds=min(times[size]),
            records=len(result.records), plan=result.plan,
            oracle_match=results_match(result.records, oracle.query(q), ordered=False),
            stats=asdict(result.stats)))
    if len(report.rows) >= 2:
        report.fit = linear_fit([m.records for m in report.rows], [m.seconds for m in report.rows])
    return report


def range_workload(records: Sequence[LogRecord], count: int, seed: int = 0) -> list[tuple[str, Query]]:
    rng = random.Random(seed)
    lo = min(r.timestamp for r in records)
    hi = max(r.timestamp for r in records)
    out = []
    for i in range(count):
        x = rng.randint(lo, hi)
        y = min(hi, x + rng.randint(0, (hi - lo) // 5))
        out.append((f"range#{i}", Query({}, (x, y))))
    return out


def run_bucket_sweep(bucket_sizes: Sequence[int], *, records_per_node: int = 2500, queries: int = 20,
                     cfg: NetworkConfig | None = None, seed: int = 0) -> BenchReport:
    """Average range-query time per bucket size on one fixed dataset and workload."""
    base = cfg or NetworkConfig()
    per_node = {n: node_records(n, records_per_node, seed) for n in range(1, base.node_count + 1)}
    everything = [r for rs in per_node.values() for r in rs]
    workload = range_workload(everything, queries, seed)
    report = BenchReport()
    for n in bucket_sizes:
        cfg = NetworkConfig(base.node_count, base.replication_delay,
                            EngineConfig(n, base.engine.buffer_size), base.max_tx_bytes, base.seal_every)
        net, oracle = load_network(per_node, cfg)
        sub = run_query_bench(net, oracle, workload)
        report.rows.append(Measurement(
            "sweep", f"bucket_size={n}", x=n, seconds=statistics.mean(m.seconds for m in sub.rows),
            records=sum(m.records for m in sub.rows), oracle_match=sub.passed,
            stats={k: sum(m.stats[k] for m in sub.rows) for k in ScanStats.__dataclass_fields__}))
    return report


def raw_record_bytes(records: Iterable[LogRecord]) -> int:
    return sum(len(encode_record(r)) for r in records)


def raw_csv_bytes(records: Iterable[LogRecord]) -> int:
    return sum(len(r.to_csv_row()) + 1 for r in records) + len(",".join(FIELDS)) + 1


def storage_report(net: Network, oracle: Oracle) -> BenchReport:
    """Per-node encoded chain size against the raw encoded and CSV sizes of the same records."""
    report = BenchReport()
    raw = raw_record_bytes(oracle.records)
    csv_bytes = raw_csv_bytes(oracle.records)
    for node in net.nodes.values():
        chain_bytes = len(node.chain.encode())
        report.rows.append(Measurement(
            "storage", f"node={node.node_id}", x=len(oracle.records), records=len(oracle.records),
            transactions=sum(len(b.txs) for b in node.chain.blocks), chain_bytes=chain_bytes,
            raw_bytes=raw, stats={"ratio_to_raw": chain_bytes / raw if raw else 0.0,
                                  "ratio_to_csv": chain_bytes / csv_bytes}))
    return report


def genesis_bytes() -> int:
    return len(Chain().encode())


__all__ = [
    "BenchReport", "Measurement", "Oracle", "genesis_bytes", "linear_fit", "load_network",
    "node_records", "oracle_query", "standard_queries", "range_workload", "results_match",
    "run_bucket_sweep", "run_load_bench", "run_query_bench", "run_retrieval_bench",
    "storage_report",
]
