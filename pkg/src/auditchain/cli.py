"""Command line entry point.

The whole network lives in one process; chains persist under the data
directory (``--data-dir``, else ``$AUDITCHAIN_DATA``, else
``./auditchain-data``) as ``node-<id>.chain`` plus ``network.conf``.

Config files are plain ``key = value`` lines (``#`` comments) with keys
``nodes``, ``bucket_size``, ``buffer_size``, ``max_tx_bytes``,
``seal_every`` and ``replication_delay``. Flags override the file; a data
directory remembers the settings it was built with and refuses conflicting
ones.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from . import bench
from .ledger import DEFAULT_MAX_TX_BYTES, read_chain_file, verify_chain
from .log_model import (
    HEADER,
    GeneratorSpec,
    LogRecord,
    MalformedRow,
    MissingHeader,
    generate,
    parse_log_file,
    write_log_file,
)
from .net_sim import Network, NetworkConfig, ScenarioError, run_scenario
from .query_engine import EngineConfig, Query, QueryError

ENV_DATA_DIR = "AUDITCHAIN_DATA"
STORED_CONFIG = "network.conf"

_DEFAULTS = {
    "nodes": 4,
    "bucket_size": EngineConfig.bucket_size,
    "buffer_size": EngineConfig.buffer_size,
    "max_tx_bytes": DEFAULT_MAX_TX_BYTES,
    "seal_every": 100,
    "replication_delay": 0,
}


class UsageError(Exception):
    pass


@dataclass
class CliConfig:
    data_dir: Path
    settings: dict

    def network_config(self) -> NetworkConfig:
        s = self.settings
        try:
            return NetworkConfig(
                node_count=s["nodes"], replication_delay=s["replication_delay"],
                engine=EngineConfig(s["bucket_size"], s["buffer_size"]),
                max_tx_bytes=s["max_tx_bytes"], seal_every=s["seal_every"], data_dir=self.data_dir)
        except ValueError as exc:
            raise UsageError(str(exc)) from None


def read_config_file(path: Path) -> dict:
    settings = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in _DEFAULTS:
            raise UsageError(f"{path}:{lineno}: expected one of {', '.join(_DEFAULTS)} as key = value")
        try:
            settings[key] = int(value.strip())
        except ValueError:
            raise UsageError(f"{path}:{lineno}: {key} must be an integer") from None
    return settings


def write_config_file(path: Path, settings: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {settings[k]}\n" for k in _DEFAULTS))


def resolve_config(args) -> CliConfig:
    data_dir = Path(args.data_dir or os.environ.get(ENV_DATA_DIR) or "auditchain-data")
    settings = dict(_DEFAULTS)
    if args.config:
        settings.update(read_config_file(Path(args.config)))
    overrides = {k: getattr(args, k) for k in _DEFAULTS if getattr(args, k, None) is not None}
    settings.update(overrides)
    stored_path = data_dir / STORED_CONFIG
    if stored_path.exists():
        stored = {**_DEFAULTS, **read_config_file(stored_path)}
        clash = {k: v for k, v in overrides.items() if stored[k] != v}
        if clash:
            raise UsageError(f"{data_dir} was built with "
                             + ", ".join(f"{k}={stored[k]}" for k in clash))
        settings = stored
    cfg = CliConfig(data_dir, settings)
    cfg.network_config()
    return cfg


def open_network(cfg: CliConfig, create: bool = False) -> Network:
    stored = cfg.data_dir / STORED_CONFIG
    if not stored.exists():
        if not create:
            raise UsageError(f"no data under {cfg.data_dir}; run `load` first")
        write_config_file(stored, cfg.settings)
    return Network(cfg.network_config())


def cmd_generate(args) -> int:
    fixed = {"node": args.node} if args.node else {}
    records = generate(GeneratorSpec(args.count, seed=args.seed, fixed=fixed))
    if args.out:
        write_log_file(args.out, records)
    else:
        sys.stdout.write(HEADER + "\n" + "".join(r.to_csv_row() + "\n" for r in records))
    return 0


def cmd_load(args) -> int:
    cfg = resolve_config(args)
    files = [Path(f) for f in args.files]
    parsed: list[list[LogRecord]] = []
    for path in files:
        try:
            parsed.append(parse_log_file(path))
        except (MalformedRow, MissingHeader) as exc:
            raise UsageError(f"{path}: {exc}") from None
        except OSError as exc:
            raise UsageError(str(exc)) from None
    n_nodes = cfg.settings["nodes"]
    plan: dict[int, list[LogRecord]] = {}
    if args.all_nodes:
        if len(parsed) == 1:
            for i, r in enumerate(parsed[0]):
                plan.setdefault(i % n_nodes + 1, []).append(r)
        elif len(parsed) <= n_nodes:
            plan = {i + 1: records for i, records in enumerate(parsed)}
        else:
            raise UsageError(f"{len(parsed)} files for {n_nodes} nodes")
    else:
        if not 1 <= args.node <= n_nodes:
            raise UsageError(f"--node must be in 1..{n_nodes}")
        plan[args.node] = [r for records in parsed for r in records]
    net = open_network(cfg, create=True)
    start = time.perf_counter()
    total = 0
    for node_id, records in plan.items():
        total += net.ingest_many(node_id, records)
        net.flush(node_id)
    net.flush()
    elapsed = time.perf_counter() - start
    print(f"loaded {total} records in {elapsed:.3f} s (height {net.canonical[-1].height})")
    return 0


def cmd_query(args) -> int:
    if not (args.eq or args.range):
        raise UsageError("query needs at least one --eq or --range")
    try:
        q = Query.parse(args.eq or [], args.range, args.order)
    except QueryError as exc:
        raise UsageError(str(exc)) from None
    cfg = resolve_config(args)
    net = open_network(cfg)
    if not 1 <= args.node <= cfg.settings["nodes"]:
        raise UsageError(f"--node must be in 1..{cfg.settings['nodes']}")
    result = net.query(args.node, q)
    out = [f"# count={len(result.records)}", HEADER]
    out += [r.to_csv_row() for r in result.records]
    sys.stdout.write("\n".join(out) + "\n")
    if result.recoveries:
        print(f"# repaired={result.stats.records_repaired}", file=sys.stderr)
    return 0


def cmd_scenario(args) -> int:
    try:
        lines = Path(args.script).read_text().splitlines()
    except OSError as exc:
        raise UsageError(str(exc)) from None
    try:
        run_scenario(lines)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def _sizes(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return default
    try:
        return [int(float(s)) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --sizes {text!r}") from None


def cmd_bench(args) -> int:
    kind = args.kind
    if kind == "load":
        report = bench.run_load_bench(_sizes(args.sizes, [1000, 2000, 5000, 10000, 20000]),
                                      repeats=args.repeats)
    elif kind == "retrieval":
        report = bench.run_retrieval_bench(_sizes(args.sizes, [1000, 2000, 5000, 10000, 20000]),
                                           repeats=args.repeats)
    elif kind == "sweep":
        report = bench.run_bucket_sweep(_sizes(args.sizes, [10, 1000, 10**5, 10**7, 10**9]))
    elif kind == "query":
        per_node = {n: bench.node_records(n, args.records, args.seed) for n in range(1, 5)}
        net, oracle = bench.load_network(per_node)
        report = bench.run_query_bench(net, oracle, bench.standard_queries(), repeats=args.repeats)
    else:  # storage
        sizes = _sizes(args.sizes, [2000, 8000])
        report = bench.BenchReport()
        for size in sizes:
            per_node = {n: bench.node_records(n, size // 4, args.seed) for n in range(1, 5)}
            net, oracle = bench.load_network(per_node)
            report.rows += bench.storage_report(net, oracle).rows
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.to_json() if args.json else report.summary())
    return 0 if report.passed else 1


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    nodes = [args.node] if args.node else range(1, cfg.settings["nodes"] + 1)
    bad = 0
    for node_id in nodes:
        path = cfg.data_dir / f"node-{node_id}.chain"
        try:
            chain = read_chain_file(path)
            ok = verify_chain(chain)
            detail = f"height={chain.tip_height}"
        except (OSError, ValueError) as exc:
            ok, detail = False, str(exc)
        bad += not ok
        print(f"node {node_id}: {'valid' if ok else 'INVALID'} {detail}")
    return 1 if bad else 0


def cmd_tamper(args) -> int:
    """Test hook: flip one payload byte in a node's chain file, keeping stored hashes."""
    cfg = resolve_config(args)
    path = cfg.data_dir / f"node-{args.node}.chain"
    chain = read_chain_file(path)
    block = chain.blocks[args.height]
    tx = block.txs[args.tx]
    raw = bytearray(tx.raw)
    raw[args.byte % len(raw)] ^= 0xFF
    txs = list(block.txs)
    txs[args.tx] = dataclasses.replace(tx, raw=bytes(raw))
    chain.blocks[args.height] = dataclasses.replace(block, txs=tuple(txs))
    path.write_bytes(chain.encode())
    print(f"tampered node {args.node} block {args.height} tx {args.tx}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auditchain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir")
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--nodes", type=int)
    common.add_argument("--bucket-size", dest="bucket_size", type=int)
    common.add_argument("--buffer-size", dest="buffer_size", type=int)
    common.add_argument("--max-tx-bytes", dest="max_tx_bytes", type=int)
    common.add_argument("--seal-every", dest="seal_every", type=int)
    common.add_argument("--replication-delay", dest="replication_delay", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic log CSV")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--node", type=int, help="pin the node field")
    p.add_argument("--out")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("load", parents=[common], help="ingest CSV files")
    p.add_argument("files", nargs="+")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--node", type=int, default=1)
    where.add_argument("--all-nodes", action="store_true",
                       help="one file per node, or split a single file round-robin")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("query", parents=[common], help="run a query at one node")
    p.add_argument("--eq", action="append", metavar="FIELD=VALUE")
    p.add_argument("--range", metavar="LO..HI")
    p.add_argument("--order", metavar="FIELD:asc|desc")
    p.add_argument("--node", type=int, default=1)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("scenario", help="run a scenario script")
    p.add_argument("script")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("bench", help="run a benchmark")
    p.add_argument("kind", choices=["load", "query", "retrieval", "sweep", "storage"])
    p.add_argument("--sizes", help="comma-separated sizes (bucket sizes for sweep)")
    p.add_argument("--records", type=int, default=10_000, help="records per node (query bench)")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--out", help="also write the CSV report here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", parents=[common], help="check every node's chain file")
    p.add_argument("--node", type=int)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tamper", parents=[common], help="test hook: corrupt one sealed payload byte")
    p.add_argument("--node", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--tx", type=int, default=0)
    p.add_argument("--byte", type=int, default=0)
    p.set_defaults(func=cmd_tamper)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
