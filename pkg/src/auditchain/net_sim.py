"""In-process permissioned network: N nodes, each with a ledger, index and engine.

Transactions appended at one node are broadcast into every up peer's
pending pool. Blocks are sealed round-robin (falling over to the next up
node when the scheduled one is down) and delivered to peers, optionally
after a logical-tick delay. All steps run on the caller's thread; the
harness is the serialization point.
"""

from __future__ import annotations

import dataclasses
import logging
import shlex
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable

from .kvstore import KVStore
from .ledger import DEFAULT_MAX_TX_BYTES, Block, Ledger, Transaction, expected_sealer
from .log_model import GeneratorSpec, LogRecord, MalformedRow, generate, parse_row
from .query_engine import EngineConfig, Query, QueryEngine, QueryError, QueryResult
from .streams import StreamNode

logger = logging.getLogger(__name__)


class NodeDown(RuntimeError):
    pass


class AlreadyCrashed(RuntimeError):
    pass


class AlreadyUp(RuntimeError):
    pass


class Status(str, Enum):
    UP = "up"
    CRASHED = "crashed"


@dataclass(frozen=True)
class NetworkConfig:
    node_count: int = 4
    replication_delay: int = 0
    engine: EngineConfig = field(default_factory=EngineConfig)
    max_tx_bytes: int = DEFAULT_MAX_TX_BYTES
    # seal after a flush, or after this many single-record ingests
    seal_every: int = 100
    data_dir: Path | None = None

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.replication_delay < 0 or self.seal_every < 1:
            raise ValueError("replication_delay must be >= 0 and seal_every >= 1")


@dataclass
class NodeHandle:
    node_id: int
    ledger: Ledger
    streams: StreamNode
    engine: QueryEngine | None
    status: Status = Status.UP

    @property
    def chain(self):
        return self.ledger.chain

    @property
    def index(self) -> KVStore:
        return self.streams.index

    @property
    def up(self) -> bool:
        return self.status is Status.UP


class Network:
    def __init__(self, cfg: NetworkConfig | None = None):
        self.cfg = cfg or NetworkConfig()
        self.tick = 0
        self.restarts = 0
        self._since_seal = 0
        self._due: dict[int, int] = {}
        self.nodes: dict[int, NodeHandle] = {}
        for node_id in range(1, self.cfg.node_count + 1):
            ledger = self._open_ledger(node_id)
            streams = StreamNode(ledger, broadcast=self._broadcaster(node_id))
            self.nodes[node_id] = NodeHandle(node_id, ledger, streams, None)
        self._catch_up_all()
        for node in self.nodes.values():
            node.engine = self._new_engine(node)
        if self.canonical[-1].height == 0:
            self.nodes[1].engine.create_layout()
            self.commit()

    # plumbing

    def _open_ledger(self, node_id: int) -> Ledger:
        path = None
        if self.cfg.data_dir is not None:
            path = Path(self.cfg.data_dir) / f"node-{node_id}.chain"
        return Ledger(node_id, self.cfg.node_count, max_tx_bytes=self.cfg.max_tx_bytes, path=path)

    def _new_engine(self, node: NodeHandle) -> QueryEngine:
        epoch = (node.ledger.tip_height << 8) | (self.restarts & 0xFF)
        return QueryEngine(node.streams, self.cfg.engine, sync=self.commit, epoch=epoch)

    def _broadcaster(self, origin: int):
        def broadcast(tx: Transaction) -> None:
            for node in self.nodes.values():
                if node.node_id != origin and node.up:
                    node.ledger.accept_broadcast(tx)
        return broadcast

    @property
    def canonical(self) -> list[Block]:
        """The longest chain held by any node (all chains are prefixes of it)."""
        return max((n.ledger.chain.blocks for n in self.nodes.values()), key=len)

    def node(self, node_id: int) -> NodeHandle:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise ValueError(f"no node {node_id}") from None

    def _up(self, node_id: int) -> NodeHandle:
        node = self.node(node_id)
        if not node.up:
            raise NodeDown(f"node {node_id} is crashed")
        return node

    def up_nodes(self) -> list[NodeHandle]:
        return [n for n in self.nodes.values() if n.up]

    def down_ids(self) -> set[int]:
        return {n.node_id for n in self.nodes.values() if not n.up}

    def _deliver(self, node: NodeHandle, blocks: list[Block], force: bool) -> int:
        delivered = 0
        while node.ledger.tip_height + 1 < len(blocks):
            block = blocks[node.ledger.tip_height + 1]
            if not force and self._due.get(block.height, 0) > self.tick:
                break
            node.ledger.receive_block(block)
            node.streams.apply_block(block)
            delivered += 1
        return delivered

    def _catch_up_all(self) -> None:
        blocks = self.canonical
        for node in self.nodes.values():
            self._deliver(node, blocks, force=True)

    # block production

    def seal(self) -> Block | None:
        """Seal the pending pool at the scheduled (or failover) node; None if nothing is up."""
        blocks = self.canonical
        height = blocks[-1].height + 1
        down = self.down_ids()
        if len(down) == len(self.nodes):
            return None
        sealer = self.nodes[expected_sealer(height, self.cfg.node_count, down)]
        self._deliver(sealer, blocks, force=True)
        self.tick += 1
        block = sealer.ledger.seal_block(sealer.node_id, self.tick, down)
        sealer.streams.apply_block(block)
        self._due[block.height] = self.tick + self.cfg.replication_delay
        self._since_seal = 0
        self.replicate()
        return block

    def replicate(self, force: bool = False) -> int:
        """Deliver due blocks to every up node. Returns blocks delivered."""
        blocks = self.canonical
        return sum(self._deliver(n, blocks, force) for n in self.up_nodes())

    def commit(self) -> None:
        """Seal anything pending and deliver it everywhere (read barrier)."""
        if any(n.ledger.pending for n in self.up_nodes()):
            self.seal()
        self.replicate(force=True)

    # workload

    def ingest(self, node_id: int, record: LogRecord) -> None:
        node = self._up(node_id)
        self.tick += 1
        flushed = node.engine.ingest(record)
        self._since_seal += 1
        if flushed or self._since_seal >= self.cfg.seal_every:
            self.seal()

    def ingest_many(self, node_id: int, records: Iterable[LogRecord]) -> int:
        n = 0
        for r in records:
            self.ingest(node_id, r)
            n += 1
        return n

    def flush(self, node_id: int | None = None) -> None:
        """End-of-stream flush at one node (or every up node), then commit."""
        targets = [self._up(node_id)] if node_id is not None else self.up_nodes()
        for node in targets:
            node.engine.flush()
        self.commit()

    def query(self, node_id: int, q: Query) -> QueryResult:
        """Run ``q`` at a node once every up node's buffer is on-chain."""
        node = self._up(node_id)
        self.flush()
        return node.engine.execute(q)

    # faults

    def crash_node(self, node_id: int) -> int:
        """Drop a node's buffer, engine and index. Returns the buffered records lost."""
        node = self.node(node_id)
        if not node.up:
            raise AlreadyCrashed(f"node {node_id} is already crashed")
        lost = node.engine.discard_buffer()
        node.engine = None
        node.streams.index = KVStore()
        node.status = Status.CRASHED
        logger.info("node %d crashed with %d buffered records", node_id, lost)
        return lost

    def restart_node(self, node_id: int) -> None:
        node = self.node(node_id)
        if node.up:
            raise AlreadyUp(f"node {node_id} is up")
        pending = node.ledger.pending
        if self.cfg.data_dir is not None:
            node.ledger = self._open_ledger(node_id)
            node.streams.ledger = node.ledger
        peers = self.up_nodes()
        node.ledger.adopt_pending(peers[0].ledger.pending if peers else pending)
        self._deliver(node, self.canonical, force=True)
        node.streams.rebuild()
        self.restarts += 1
        node.status = Status.UP
        node.engine = self._new_engine(node)
        logger.info("node %d restarted at height %d", node_id, node.ledger.tip_height)

    # inspection

    def verify(self, node_id: int) -> bool:
        return self.node(node_id).ledger.verify()

    def consistent(self) -> bool:
        """Up nodes hold the same chain and the same index."""
        nodes = self.up_nodes()
        first = nodes[0]
        return all(
            [b.block_hash for b in n.chain.blocks] == [b.block_hash for b in first.chain.blocks]
            and n.index == first.index
            for n in nodes[1:]
        )

    def tamper(self, node_id: int, height: int, tx_index: int = 0, byte_index: int = 0,
               mask: int = 0xFF) -> None:
        """Test hook: XOR one payload byte of a sealed transaction, keeping every stored hash."""
        if not mask & 0xFF:
            raise ValueError("mask must change the byte")
        chain = self.node(node_id).ledger.chain
        block = chain.blocks[height]
        tx = block.txs[tx_index]
        raw = bytearray(tx.raw)
        raw[byte_index % len(raw)] ^= mask & 0xFF
        bad = dataclasses.replace(tx, raw=bytes(raw))
        txs = block.txs[:tx_index] + (bad,) + block.txs[tx_index + 1:]
        chain.blocks[height] = dataclasses.replace(block, txs=txs)


def spawn_network(cfg: NetworkConfig | None = None) -> Network:
    return Network(cfg)


# Scenario scripts: one event per line, ``#`` starts a comment.
#
#   config nodes=4 k=4 N=10 seal_every=100 delay=0 max_tx_bytes=2097152
#   ingest at=1 1522257730000,3,12,40345,7,read,TOPMed
#   generate at=1 count=10 seed=3
#   flush [at=1] | seal | replicate | verify
#   crash at=2 | restart at=2
#   query at=2 --eq user=7 --range lo..hi --order timestamp:asc
#   expect count=10 [repaired=2]       (checks the previous query)
#   tamper at=2 height=3 tx=0 byte=5   (test hook)
#
# ``config`` may only appear before the first other event.

class ScenarioError(RuntimeError):
    def __init__(self, line: int, message: str):
        super().__init__(f"scenario line {line}: {message}")
        self.line = line


_CONFIG_KEYS = {"nodes", "k", "N", "seal_every", "delay", "max_tx_bytes"}


def _kv(tokens: list[str], allowed: set[str]) -> dict[str, str]:
    out = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep or key not in allowed:
            raise ValueError(f"unexpected argument {token!r}")
        out[key] = value
    return out


def _config_from(args: dict[str, str]) -> NetworkConfig:
    engine = EngineConfig(int(args.get("N", EngineConfig.bucket_size)),
                          int(args.get("k", EngineConfig.buffer_size)))
    return NetworkConfig(node_count=int(args.get("nodes", 4)),
                         replication_delay=int(args.get("delay", 0)), engine=engine,
                         max_tx_bytes=int(args.get("max_tx_bytes", DEFAULT_MAX_TX_BYTES)),
                         seal_every=int(args.get("seal_every", 100)))


def run_scenario(lines: Iterable[str], cfg: NetworkConfig | None = None,
                 emit: Callable[[str], None] = print) -> Network:
    """Execute a scenario script, emitting one report line per event."""
    net = None
    last: QueryResult | None = None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        verb, *rest = line.split(None, 1)
        rest = rest[0] if rest else ""
        try:
            if verb == "config":
                if net is not None:
                    raise ValueError("config must come before any other event")
                net = Network(_config_from(_kv(rest.split(), _CONFIG_KEYS)))
                emit(f"config nodes={net.cfg.node_count} k={net.cfg.engine.buffer_size} "
                     f"N={net.cfg.engine.bucket_size}")
                continue
            if net is None:
                net = Network(cfg)
            last = _run_event(net, verb, rest, lineno, last, emit)
        except ScenarioError:
            raise
        except (ValueError, KeyError, RuntimeError, QueryError, MalformedRow) as exc:
            raise ScenarioError(lineno, f"{verb}: {exc}") from exc
    return net if net is not None else Network(cfg)


def _run_event(net: Network, verb: str, rest: str, lineno: int, last, emit):
    tokens = rest.split()
    if verb == "ingest":
        args = _kv(tokens[:1], {"at"})
        if len(tokens) != 2:
            raise ValueError("expected: ingest at=N <csv row>")
        record = parse_row(tokens[1].split(","), lineno)
        net.ingest(int(args["at"]), record)
        emit(f"ingest at={args['at']} buffered={len(net.node(int(args['at'])).engine.buffer)}")
    elif verb == "generate":
        args = _kv(tokens, {"at", "count", "seed"})
        node_id = int(args["at"])
        records = generate(GeneratorSpec(int(args["count"]), seed=int(args.get("seed", 0)),
                                         fixed={"node": node_id}))
        net.ingest_many(node_id, records)
        emit(f"generate at={node_id} count={len(records)} "
             f"buffered={len(net.node(node_id).engine.buffer)}")
    elif verb == "flush":
        args = _kv(tokens, {"at"})
        net.flush(int(args["at"]) if "at" in args else None)
        emit(f"flush height={net.canonical[-1].height}")
    elif verb == "seal":
        block = net.seal()
        if block is None:
            raise ValueError("no node is up to seal")
        emit(f"seal height={block.height} sealer={block.sealer_node} txs={len(block.txs)}")
    elif verb == "replicate":
        emit(f"replicate delivered={net.replicate(force=True)}")
    elif verb == "crash":
        node_id = int(_kv(tokens, {"at"})["at"])
        emit(f"crash at={node_id} lost_buffered={net.crash_node(node_id)}")
    elif verb == "restart":
        node_id = int(_kv(tokens, {"at"})["at"])
        net.restart_node(node_id)
        emit(f"restart at={node_id} height={net.node(node_id).ledger.tip_height}")
    elif verb == "query":
        node_id = int(_kv(tokens[:1], {"at"})["at"])
        q = _parse_query_flags(tokens[1:])
        last = net.query(node_id, q)
        gaps = ",".join(str(e.gap) for e in last.recoveries) or "-"
        emit(f"query at={node_id} count={len(last.records)} plan={last.plan} "
             f"repaired={last.stats.records_repaired} gaps={gaps}")
    elif verb == "expect":
        args = _kv(tokens, {"count", "repaired"})
        if last is None:
            raise ValueError("expect needs a preceding query")
        if "count" in args and len(last.records) != int(args["count"]):
            raise ValueError(f"expected count={args['count']}, got {len(last.records)}")
        if "repaired" in args and last.stats.records_repaired != int(args["repaired"]):
            raise ValueError(f"expected repaired={args['repaired']}, got {last.stats.records_repaired}")
        emit(f"expect ok {' '.join(tokens)}")
    elif verb == "verify":
        results = {n: net.verify(n) for n in net.nodes}
        emit("verify " + " ".join(f"node{n}={'ok' if ok else 'TAMPERED'}" for n, ok in results.items()))
    elif verb == "tamper":
        args = _kv(tokens, {"at", "height", "tx", "byte"})
        net.tamper(int(args["at"]), int(args["height"]), int(args.get("tx", 0)), int(args.get("byte", 0)))
        emit(f"tamper at={args['at']} height={args['height']}")
    else:
        raise ValueError(f"unknown event {verb!r}")
    return last


def _parse_query_flags(tokens: list[str]) -> Query:
    tokens = shlex.split(" ".join(tokens))
    eq, rng, order = [], None, None
    it = iter(tokens)
    for flag in it:
        try:
            value = next(it)
        except StopIteration:
            raise QueryError(f"{flag} needs a value") from None
        if flag == "--eq":
            eq.append(value)
        elif flag == "--range":
            rng = value
        elif flag == "--order":
            order = value
        else:
            raise QueryError(f"unknown query flag {flag!r}")
    return Query.parse(eq, rng, order)
