"""Node-local multi-value index over sealed stream items.

Each (dictionary, key) holds its values in chain order together with a
provenance tuple ``(txid, height, tx_index, position)``. Counts are read
from the list length, which Python keeps as a stored field, so ``count``
is O(1).
"""

from __future__ import annotations

import base64
import json
import threading
from pathlib import Path

from .ledger import Provenance

SNAPSHOT_VERSION = 1


class UnknownDictionary(KeyError):
    pass


class _Entry:
    __slots__ = ("values", "provenance")

    def __init__(self):
        self.values: list[bytes] = []
        self.provenance: list[Provenance] = []


class KVStore:
    def __init__(self):
        self._dicts: dict[str, dict[str, _Entry]] = {}
        self._created: dict[str, int] = {}
        self._lock = threading.Lock()

    def create(self, dictionary: str, created_at_height: int = 0) -> None:
        with self._lock:
            if dictionary not in self._dicts:
                self._dicts[dictionary] = {}
                self._created[dictionary] = created_at_height

    def has(self, dictionary: str) -> bool:
        return dictionary in self._dicts

    def dictionaries(self) -> dict[str, int]:
        return dict(self._created)

    def _table(self, dictionary: str) -> dict[str, _Entry]:
        try:
            return self._dicts[dictionary]
        except KeyError:
            raise UnknownDictionary(dictionary) from None

    def put(self, dictionary: str, key: str, value: bytes, provenance: Provenance) -> None:
        table = self._table(dictionary)
        with self._lock:
            entry = table.get(key)
            if entry is None:
                entry = table[key] = _Entry()
            entry.values.append(value)
            entry.provenance.append(provenance)

    def put_many(self, rows) -> None:
        """Bulk put of (dictionary, key, value, provenance) rows under one lock."""
        dicts = self._dicts
        with self._lock:
            for dictionary, key, value, provenance in rows:
                table = dicts.get(dictionary)
                if table is None:
                    raise UnknownDictionary(dictionary)
                entry = table.get(key)
                if entry is None:
                    entry = table[key] = _Entry()
                entry.values.append(value)
                entry.provenance.append(provenance)

    def get(self, dictionary: str, key: str) -> list[bytes]:
        entry = self._table(dictionary).get(key)
        return list(entry.values) if entry else []

    def get_with_provenance(self, dictionary: str, key: str) -> list[tuple[bytes, Provenance]]:
        entry = self._table(dictionary).get(key)
        return list(zip(entry.values, entry.provenance)) if entry else []

    def count(self, dictionary: str, key: str) -> int:
        entry = self._table(dictionary).get(key)
        return len(entry.values) if entry else 0

    def last_n(self, dictionary: str, key: str, n: int) -> list[bytes]:
        if n < 1:
            raise ValueError("n must be positive")
        entry = self._table(dictionary).get(key)
        return entry.values[-n:] if entry else []

    def keys(self, dictionary: str) -> list[str]:
        return list(self._table(dictionary))

    def __eq__(self, other) -> bool:
        if not isinstance(other, KVStore):
            return NotImplemented
        return self._created == other._created and self.dump() == other.dump()

    def dump(self) -> dict:
        """Plain nested-dict view: {dictionary: {key: [(value, provenance), ...]}}."""
        return {
            d: {k: list(zip(e.values, e.provenance)) for k, e in table.items()}
            for d, table in self._dicts.items()
        }

    def save_snapshot(self, path: str | Path) -> None:
        """Write a versioned JSON snapshot (values base64-encoded)."""
        doc = {"version": SNAPSHOT_VERSION, "dictionaries": {}}
        for d, table in self._dicts.items():
            doc["dictionaries"][d] = {
                "created_at_height": self._created[d],
                "keys": {
                    k: [[base64.b64encode(v).decode("ascii"), *p] for v, p in zip(e.values, e.provenance)]
                    for k, e in table.items()
                },
            }
        Path(path).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "KVStore":
        doc = json.loads(Path(path).read_text())
        if doc.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
        store = cls()
        for d, body in doc["dictionaries"].items():
            store.create(d, body["created_at_height"])
            for k, rows in body["keys"].items():
                for v, txid, height, tx_index, pos in rows:
                    store.put(d, k, base64.b64decode(v), Provenance(txid, height, tx_index, pos))
        return store
