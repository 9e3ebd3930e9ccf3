import json
import random

import pytest

from auditchain.bench import (
    Oracle,
    genesis_bytes,
    linear_fit,
    load_network,
    node_records,
    range_workload,
    raw_record_bytes,
    results_match,
    run_bucket_sweep,
    run_load_bench,
    run_query_bench,
    run_retrieval_bench,
    standard_queries,
    storage_report,
)
from auditchain.net_sim import NetworkConfig
from auditchain.query_engine import EngineConfig, Query

from conftest import make_record

SMALL = NetworkConfig(engine=EngineConfig(10**7, 50))


def test_oracle_by_hand():
    rs = [make_record(timestamp=t, user=u) for t, u in [(5, 1), (3, 2), (4, 1), (9, 1)]]
    oracle = Oracle(rs)
    assert oracle.query(Query({"user": 1})) == [rs[0], rs[2], rs[3]]
    assert oracle.query(Query({"user": 1}, (4, 5))) == [rs[0], rs[2]]
    assert oracle.query(Query({"user": 1}, order_by=("timestamp", "desc"))) == [rs[3], rs[0], rs[2]]


def test_results_match():
    a, b = make_record(user=1), make_record(user=2)
    assert results_match([a, b], [b, a], ordered=False)
    assert not results_match([a, b], [b, a], ordered=True)
    assert not results_match([a, a], [a], ordered=False)


def test_linear_fit_exact_line():
    slope, intercept, r2 = linear_fit([1, 2, 3, 4], [3, 5, 7, 9])
    assert slope == pytest.approx(2) and intercept == pytest.approx(1) and r2 == pytest.approx(1)
    assert linear_fit([1, 2, 3], [4, 4, 4])[2] == 1.0


def test_node_records_pin_node():
    rs = node_records(3, 100, seed=1)
    assert {r.node for r in rs} == {3}
    assert node_records(3, 100, seed=1) == rs


def test_query_bench_matches_oracle():
    per_node = {n: node_records(n, 400) for n in range(1, 5)}
    net, oracle = load_network(per_node, SMALL)
    report = run_query_bench(net, oracle, standard_queries())
    assert report.passed and len(report.rows) == 4
    assert all(m.seconds > 0 for m in report.rows)
    rows = json.loads(report.to_json())["rows"]
    assert [r["label"] for r in rows] == [label for label, _ in standard_queries()]
    assert report.to_csv().count("\n") == 5


def test_load_and_retrieval_reports():
    load = run_load_bench([200, 400], cfg=SMALL)
    assert [m.records for m in load.rows] == [200, 400] and load.fit is not None
    retrieval = run_retrieval_bench([100, 300], cfg=SMALL, repeats=1)
    assert retrieval.passed and [m.records for m in retrieval.rows] == [100, 300]
    assert "linear fit" in retrieval.summary()


def test_bucket_sweep_is_oracle_checked():
    report = run_bucket_sweep([10**5, 10**8], records_per_node=100, queries=5, cfg=SMALL)
    assert report.passed and len(report.rows) == 2
    # one workload, so every bucket size returns the same records
    assert report.rows[0].records == report.rows[1].records


def test_range_workload_is_valid():
    rs = node_records(1, 200)
    for _, q in range_workload(rs, 30, seed=4):
        assert q.range[0] <= q.range[1]


def test_storage_report():
    per_node = {n: node_records(n, 100) for n in range(1, 5)}
    net, oracle = load_network(per_node, SMALL)
    report = storage_report(net, oracle)
    assert len(report.rows) == 4
    assert len({m.chain_bytes for m in report.rows}) == 1
    assert report.rows[0].raw_bytes == raw_record_bytes(oracle.records)
    assert report.rows[0].chain_bytes > genesis_bytes()


def test_oracle_edge_cases():
    assert Oracle().query(Query({"user": 1})) == []
    rs = node_records(1, 50)
    assert Oracle(rs).query(Query({"node": 1})) == rs


def test_load_bench_size_zero_seals_nothing():
    report = run_load_bench([0], cfg=SMALL)
    assert report.rows[0].transactions == 0 and report.fit is None


def test_load_bench_counts_transactions():
    # 100 records over 4 nodes, k=50: 8 regular txs per record + one batch flush per node
    report = run_load_bench([100], cfg=SMALL)
    assert report.rows[0].transactions == 100 * 8 + 4 * 8


def test_empty_workload():
    net, oracle = load_network({1: node_records(1, 10)}, SMALL)
    report = run_query_bench(net, oracle, [])
    assert report.rows == [] and report.passed


def test_oracle_agrees_with_independent_scan():
    # second implementation: Query.matches plus a decorate-sort-undecorate ordering
    rng = random.Random(9)
    rs = node_records(2, 600, seed=9, cardinalities={"user": 4, "activity": 3, "id": 40})
    oracle = Oracle(rs)
    for _ in range(300):
        source = rng.choice(rs)
        eq = {n: getattr(source, n) for n in rng.sample(("user", "activity", "id", "resource"), rng.randint(0, 2))}
        lo = rng.randint(min(r.timestamp for r in rs), max(r.timestamp for r in rs))
        rng_bounds = (lo, lo + rng.randint(0, 10**9)) if not eq or rng.random() < 0.5 else None
        order = (rng.choice(("user", "timestamp", "resource")), rng.choice(("asc", "desc"))) \
            if rng.random() < 0.5 else None
        q = Query(eq, rng_bounds, order)
        expected = [r for r in rs if q.matches(r)]
        if order is not None:
            name, direction = order
            decorated = [(getattr(r, name), i, r) for i, r in enumerate(expected)]
            if direction == "desc":
                decorated.sort(key=lambda d: (d[0], -d[1]), reverse=True)
            else:
                decorated.sort()
            expected = [r for _, _, r in decorated]
        assert oracle.query(q) == expected
