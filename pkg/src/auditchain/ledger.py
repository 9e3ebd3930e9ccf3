"""Append-only, hash-linked chain of blocks.

Canonical encoding (all integers big-endian, digests are raw 32-byte SHA-256):

    stream item   u16 len | dictionary | u16 len | key | u32 len | value
    tx payload    u32 item_count | item*
    block header  u64 height | 32B prev_hash | u32 sealer | u64 seal_time
                  | u32 tx_count | (u32 origin | 32B txid | u32 byte_size)*
    block (wire)  header | (u32 len | payload)* | 32B block_hash
    chain file    (u32 len | block)*

``txid = sha256(payload)`` and ``block_hash = sha256(header)``, so every
payload byte is covered by its block hash through the txid.

Sealing is round-robin: height ``h`` belongs to node ``(h - 1) % n + 1``.
A ledger is single-writer; appends, seals and block receipt take the
ledger's lock, and readers should go through ``snapshot()``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
import sys
import threading
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

logger = logging.getLogger(__name__)

DEFAULT_MAX_TX_BYTES = 2 * 1024 * 1024
ZERO_HASH = "00" * 32

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_HEAD = struct.Struct(">Q32sIQI")
_TXREF = struct.Struct(">I32sI")


class LedgerError(Exception):
    pass


class TxTooLarge(LedgerError):
    pass


class EmptyPayload(LedgerError):
    pass


class NotYourTurn(LedgerError):
    pass


class ChainLinkError(LedgerError):
    """A received block does not extend the local tip."""


class StreamItem(NamedTuple):
    dictionary: str
    key: str
    value: bytes


class Provenance(NamedTuple):
    """Where a stream item sits on the chain."""

    txid: str
    height: int
    tx_index: int
    position: int

    @property
    def order(self) -> tuple[int, int, int]:
        return (self.height, self.tx_index, self.position)


def encode_payload(items: Iterable[StreamItem]) -> bytes:
    parts = []
    count = 0
    for dictionary, key, value in items:
        d = dictionary.encode("utf-8")
        k = key.encode("utf-8")
        parts += (_U16.pack(len(d)), d, _U16.pack(len(k)), k, _U32.pack(len(value)), value)
        count += 1
    return _U32.pack(count) + b"".join(parts)


def payload_size(items: Iterable[StreamItem]) -> int:
    """Length of encode_payload(items) without building it."""
    size = 4
    for dictionary, key, value in items:
        size += 8 + len(dictionary.encode("utf-8")) + len(key.encode("utf-8")) + len(value)
    return size


def decode_payload(raw: bytes) -> tuple[StreamItem, ...]:
    try:
        (count,) = _U32.unpack_from(raw, 0)
        off = 4
        items = []
        for _ in range(count):
            (n,) = _U16.unpack_from(raw, off)
            off += 2
            dictionary = sys.intern(raw[off:off + n].decode("utf-8"))
            off += n
            (n,) = _U16.unpack_from(raw, off)
            off += 2
            key = raw[off:off + n].decode("utf-8")
            off += n
            (n,) = _U32.unpack_from(raw, off)
            off += 4
            value = raw[off:off + n]
            if len(value) != n:
                raise ValueError("truncated value")
            off += n
            items.append(StreamItem(dictionary, key, value))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ValueError(f"corrupt payload: {exc}") from None
    if off != len(raw):
        raise ValueError("trailing bytes after payload")
    return tuple(items)


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Transaction:
    """A sealed or pending transaction; ``raw`` is the canonical payload."""

    txid: str
    raw: bytes
    origin_node: int
    byte_size: int

    @classmethod
    def create(cls, items: Iterable[StreamItem], origin_node: int) -> "Transaction":
        items = tuple(items)
        if not items:
            raise EmptyPayload("transaction payload is empty")
        raw = encode_payload(items)
        tx = cls(_digest(raw), raw, origin_node, len(raw))
        # seed the cache so the sender never re-decodes its own payload
        tx.__dict__["payload"] = items
        return tx

    @cached_property
    def payload(self) -> tuple[StreamItem, ...]:
        return decode_payload(self.raw)

    def is_intact(self) -> bool:
        return len(self.raw) == self.byte_size and _digest(self.raw) == self.txid


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    sealer_node: int
    seal_time: int
    txs: tuple[Transaction, ...]
    block_hash: str

    @classmethod
    def create(cls, height, prev_hash, sealer_node, seal_time, txs) -> "Block":
        txs = tuple(txs)
        return cls(height, prev_hash, sealer_node, seal_time, txs,
                   compute_block_hash(height, prev_hash, sealer_node, seal_time, txs))

    @cached_property
    def indexed_items(self) -> tuple[tuple[StreamItem, Provenance], ...]:
        return tuple(
            (item, Provenance(tx.txid, self.height, i, pos))
            for i, tx in enumerate(self.txs)
            for pos, item in enumerate(tx.payload)
        )

    @property
    def byte_size(self) -> int:
        return _HEAD.size + len(self.txs) * (_TXREF.size + 4) + sum(t.byte_size for t in self.txs) + 32


def block_header(height, prev_hash, sealer_node, seal_time, txs) -> bytes:
    parts = [_HEAD.pack(height, bytes.fromhex(prev_hash), sealer_node, seal_time, len(txs))]
    parts += [_TXREF.pack(t.origin_node, bytes.fromhex(t.txid), t.byte_size) for t in txs]
    return b"".join(parts)


def compute_block_hash(height, prev_hash, sealer_node, seal_time, txs) -> str:
    return _digest(block_header(height, prev_hash, sealer_node, seal_time, txs))


def encode_block(block: Block) -> bytes:
    parts = [block_header(block.height, block.prev_hash, block.sealer_node, block.seal_time, block.txs)]
    for tx in block.txs:
        parts += (_U32.pack(len(tx.raw)), tx.raw)
    parts.append(bytes.fromhex(block.block_hash))
    return b"".join(parts)


def decode_block(data: bytes) -> Block:
    """Inverse of encode_block. Stored digests are kept as-is, not recomputed."""
    try:
        height, prev, sealer, seal_time, ntx = _HEAD.unpack_from(data, 0)
        off = _HEAD.size
        refs = []
        for _ in range(ntx):
            refs.append(_TXREF.unpack_from(data, off))
            off += _TXREF.size
        txs = []
        for origin, txid, size in refs:
            (n,) = _U32.unpack_from(data, off)
            off += 4
            raw = data[off:off + n]
            off += n
            txs.append(Transaction(txid.hex(), raw, origin, size))
        block_hash = data[off:off + 32]
        off += 32
    except struct.error as exc:
        raise ValueError(f"corrupt block: {exc}") from None
    if len(block_hash) != 32 or off != len(data):
        raise ValueError("corrupt block framing")
    return Block(height, prev.hex(), sealer, seal_time, tuple(txs), block_hash.hex())


def genesis_block() -> Block:
    return Block.create(0, ZERO_HASH, 0, 0, ())


def scheduled_sealer(height: int, node_count: int) -> int:
    return (height - 1) % node_count + 1


def expected_sealer(height: int, node_count: int, down: Iterable[int] = ()) -> int:
    """Scheduled sealer, or the next node round-robin if it is down."""
    down = set(down)
    first = scheduled_sealer(height, node_count)
    for step in range(node_count):
        candidate = (first - 1 + step) % node_count + 1
        if candidate not in down:
            return candidate
    raise NotYourTurn("every node is down")


@dataclass
class Chain:
    blocks: list[Block] = dataclasses.field(default_factory=lambda: [genesis_block()])

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def tip_height(self) -> int:
        return self.blocks[-1].height

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, height: int) -> Block:
        return self.blocks[height]

    def byte_size(self) -> int:
        return sum(b.byte_size for b in self.blocks)

    def encode(self) -> bytes:
        return b"".join(_frame(encode_block(b)) for b in self.blocks)


def verify_block(block: Block, prev: Block | None) -> bool:
    expected_prev = ZERO_HASH if prev is None else prev.block_hash
    expected_height = 0 if prev is None else prev.height + 1
    if block.height != expected_height or block.prev_hash != expected_prev:
        return False
    if not all(tx.is_intact() for tx in block.txs):
        return False
    recomputed = compute_block_hash(block.height, block.prev_hash, block.sealer_node,
                                    block.seal_time, block.txs)
    return recomputed == block.block_hash


def verify_chain(chain: Chain | Iterable[Block]) -> bool:
    """True iff every digest recomputes and every prev_hash link matches."""
    prev = None
    for block in chain:
        if not verify_block(block, prev):
            return False
        prev = block
    return prev is not None


def _frame(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


def read_chain_file(path: str | Path) -> Chain:
    data = Path(path).read_bytes()
    blocks = []
    off = 0
    while off < len(data):
        if off + 4 > len(data):
            logger.warning("%s: dropping truncated frame header at byte %d", path, off)
            break
        (n,) = _U32.unpack_from(data, off)
        if off + 4 + n > len(data):
            logger.warning("%s: dropping truncated block at byte %d", path, off)
            break
        blocks.append(decode_block(data[off + 4:off + 4 + n]))
        off += 4 + n
    if not blocks:
        return Chain()
    return Chain(blocks)


class Ledger:
    """One node's view: its chain plus the pending pool of unsealed transactions."""

    def __init__(self, node_id: int, node_count: int, *, max_tx_bytes: int = DEFAULT_MAX_TX_BYTES,
                 path: str | Path | None = None):
        if not 1 <= node_id <= node_count:
            raise ValueError(f"node id {node_id} outside 1..{node_count}")
        self.node_id = node_id
        self.node_count = node_count
        self.max_tx_bytes = max_tx_bytes
        self.path = Path(path) if path is not None else None
        self.pending: list[Transaction] = []
        self._lock = threading.RLock()
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            self.chain = read_chain_file(self.path)
        else:
            self.chain = Chain()
            self._persist(self.chain.blocks[0], truncate=True)

    @property
    def tip_height(self) -> int:
        return self.chain.tip_height

    def check_size(self, tx: Transaction) -> None:
        if tx.byte_size > self.max_tx_bytes:
            raise TxTooLarge(f"transaction is {tx.byte_size} bytes, limit {self.max_tx_bytes}")

    def append_transaction(self, tx: Transaction) -> str:
        if tx.byte_size == 0 or not tx.payload:
            raise EmptyPayload("transaction payload is empty")
        self.check_size(tx)
        with self._lock:
            self.pending.append(tx)
        return tx.txid

    def accept_broadcast(self, tx: Transaction) -> None:
        """Pool a transaction appended at a peer (already validated there)."""
        with self._lock:
            self.pending.append(tx)

    def seal_block(self, sealer: int, seal_time: int = 0, down: Iterable[int] = ()) -> Block:
        with self._lock:
            height = self.tip_height + 1
            expected = expected_sealer(height, self.node_count, down)
            if sealer != expected or sealer != self.node_id:
                raise NotYourTurn(f"height {height} is sealed by node {expected}, not {sealer}")
            block = Block.create(height, self.chain.tip.block_hash, sealer, seal_time, self.pending)
            self.pending = []
            self.chain.blocks.append(block)
            self._persist(block)
        return block

    def receive_block(self, block: Block) -> None:
        with self._lock:
            if block.height != self.tip_height + 1 or block.prev_hash != self.chain.tip.block_hash:
                raise ChainLinkError(
                    f"node {self.node_id}: block {block.height} does not extend tip {self.tip_height}")
            self.chain.blocks.append(block)
            self._persist(block)
            self._drop_pending(block.txs)

    def adopt_pending(self, txs: Iterable[Transaction]) -> None:
        with self._lock:
            self.pending = list(txs)

    def _drop_pending(self, txs: Iterable[Transaction]) -> None:
        sealed = Counter(t.txid for t in txs)
        keep = []
        for tx in self.pending:
            if sealed[tx.txid]:
                sealed[tx.txid] -= 1
            else:
                keep.append(tx)
        self.pending = keep

    def is_pending(self, txid: str) -> bool:
        with self._lock:
            return any(t.txid == txid for t in self.pending)

    def snapshot(self) -> Chain:
        with self._lock:
            return Chain(list(self.chain.blocks))

    def verify(self) -> bool:
        return verify_chain(self.snapshot())

    def _persist(self, block: Block, truncate: bool = False) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "wb" if truncate else "ab") as fh:
            fh.write(_frame(encode_block(block)))
