"""Dictionaries on top of the ledger: writes are transactions, reads hit the local index.

Dictionary creation is itself an on-chain item in the reserved ``root``
dictionary (key = new dictionary name), so every node learns the namespace
from the same blocks. Only sealed data is visible to reads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

from .kvstore import KVStore, UnknownDictionary
from .ledger import Block, Ledger, Provenance, StreamItem, Transaction

ROOT = "root"

__all__ = [
    "ROOT", "DictionaryDescriptor", "DuplicateDictionary", "StreamItem", "StreamNode",
    "UnknownDictionary",
]


class DuplicateDictionary(ValueError):
    pass


@dataclass(frozen=True)
class DictionaryDescriptor:
    name: str
    created_at_height: int


class StreamNode:
    """The stream API of one node.

    ``broadcast`` is called with every transaction appended here so peers
    can pool it; the network harness supplies it.
    """

    def __init__(self, ledger: Ledger, index: KVStore | None = None,
                 broadcast: Callable[[Transaction], None] | None = None):
        self.ledger = ledger
        self.node_id = ledger.node_id
        self.broadcast = broadcast
        if index is None:
            index = KVStore()
            self.index = index
            self.rebuild()
        else:
            self.index = index

    # writes

    def _submit(self, items: Sequence[StreamItem]) -> str:
        tx = Transaction.create(items, self.node_id)
        txid = self.ledger.append_transaction(tx)
        if self.broadcast is not None:
            self.broadcast(tx)
        return txid

    def _pending_creations(self) -> set[str]:
        return {
            item.key
            for tx in list(self.ledger.pending)
            for item in tx.payload
            if item.dictionary == ROOT
        }

    def create_dictionary(self, name: str) -> str:
        if not name or name == ROOT:
            raise ValueError(f"invalid dictionary name {name!r}")
        if self.index.has(name) or name in self._pending_creations():
            raise DuplicateDictionary(name)
        return self._submit([StreamItem(ROOT, name, b"")])

    def _require(self, name: str) -> None:
        if not self.index.has(name):
            raise UnknownDictionary(name)

    def insert(self, name: str, value: bytes, key: str) -> str:
        self._require(name)
        if not key:
            raise ValueError("stream keys must be non-empty")
        return self._submit([StreamItem(name, key, value)])

    def insert_batch(self, name: str, items: Iterable[tuple[bytes, str]]) -> str:
        """Publish every (value, key) pair in one transaction, or nothing."""
        self._require(name)
        batch = [StreamItem(name, key, value) for value, key in items]
        if any(not item.key for item in batch):
            raise ValueError("stream keys must be non-empty")
        return self._submit(batch)

    # reads

    def retrieve(self, name: str, key: str) -> list[bytes]:
        return self.index.get(name, key)

    def retrieve_with_provenance(self, name: str, key: str) -> list[tuple[bytes, Provenance]]:
        return self.index.get_with_provenance(name, key)

    def get_count(self, name: str, key: str) -> int:
        return self.index.count(name, key)

    def last_n(self, name: str, key: str, n: int) -> list[bytes]:
        return self.index.last_n(name, key, n)

    def list_keys(self, name: str) -> list[str]:
        return self.index.keys(name)

    def dictionaries(self) -> list[DictionaryDescriptor]:
        return [DictionaryDescriptor(n, h) for n, h in sorted(self.index.dictionaries().items())]

    def is_pending(self, txid: str) -> bool:
        return self.ledger.is_pending(txid)

    # chain -> index

    def apply_block(self, block: Block) -> None:
        index = self.index
        rows = []
        for item, prov in block.indexed_items:
            if item.dictionary == ROOT:
                index.put_many(rows)
                rows = []
                index.create(item.key, block.height)
            else:
                rows.append((item.dictionary, item.key, item.value, prov))
        index.put_many(rows)

    def rebuild(self) -> KVStore:
        """Replace the index with a fresh replay of the local chain."""
        self.index = KVStore()
        for block in self.ledger.snapshot():
            self.apply_block(block)
        return self.index

    def seal(self, seal_time: int = 0) -> Block:
        """Seal locally and index the block (single-node use; networks seal themselves)."""
        block = self.ledger.seal_block(self.node_id, seal_time)
        self.apply_block(block)
        return block
