"""Conjunctive-equality and timestamp-range queries over stream dictionaries.

Layout: every field ``f`` gets a ``regular-f`` and a ``batch-f`` dictionary
keyed by the field value, and the timestamp bucket ``t // N`` gets
``regular-range`` and ``batch-range``. Each ingested record is written to
the regular tier at once (one transaction per dictionary) and buffered for
the batch tier, which receives ``k`` records per transaction.

Reads go to the batch tier. A shortfall against the regular tier's count
means buffered records were lost in a crash; they are copied over from the
regular tier and written back to the batch dictionary.

Every stored value is ``encode_record(r)`` followed by a 16-byte ingest tag
(u32 origin node, u32 epoch, u64 sequence) so repaired records can be told
apart from identical-looking ones.
"""

from __future__ import annotations

import logging
import struct
import sys
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .ledger import StreamItem, payload_size
from .log_model import (
    FIELDS,
    INT_FIELDS,
    LogRecord,
    canonical_key,
    coerce_field,
    decode_record,
    encode_record,
)
from .streams import StreamNode

logger = logging.getLogger(__name__)

DEFAULT_BUCKET_SIZE = 10**7
DEFAULT_BUFFER_SIZE = 10**4
RANGE = "range"
TIERS = ("regular", "batch")

_TAG = struct.Struct(">IIQ")
_PENDING_HEIGHT = sys.maxsize


class QueryError(ValueError):
    pass


class InvalidRange(QueryError):
    pass


class NegativeGap(RuntimeError):
    """The batch tier holds more records than the regular tier."""


class BufferTooLarge(ValueError):
    """A full buffer would not fit in one transaction; lower buffer_size."""


@dataclass(frozen=True)
class EngineConfig:
    bucket_size: int = DEFAULT_BUCKET_SIZE
    buffer_size: int = DEFAULT_BUFFER_SIZE

    def __post_init__(self):
        if self.bucket_size < 1 or self.buffer_size < 1:
            raise ValueError("bucket_size and buffer_size must be >= 1")


@dataclass(frozen=True)
class DictionaryPair:
    regular: str
    batch: str

    @classmethod
    def for_field(cls, name: str) -> "DictionaryPair":
        return cls(f"regular-{name}", f"batch-{name}")


PAIRS = {name: DictionaryPair.for_field(name) for name in (*FIELDS, RANGE)}


def layout() -> list[str]:
    """All 16 dictionary names, regular tier first."""
    return [getattr(PAIRS[n], tier) for tier in TIERS for n in (*FIELDS, RANGE)]


@dataclass
class Query:
    equality: dict = field(default_factory=dict)
    range: tuple[int, int] | None = None
    order_by: tuple[str, str] | None = None

    def __post_init__(self):
        if not isinstance(self.equality, dict):
            pairs = list(self.equality)
            self.equality = dict(pairs)
            if len(self.equality) != len(pairs):
                raise QueryError("at most one predicate per field")
        for name, value in self.equality.items():
            if name not in FIELDS:
                raise QueryError(f"unknown field {name!r}")
            expected = int if name in INT_FIELDS else str
            if type(value) is not expected:
                raise QueryError(f"{name} compares against {expected.__name__}, got {value!r}")
        if self.range is not None:
            x, y = self.range
            if x < 1 or x > y:
                raise InvalidRange(f"invalid timestamp range [{x}, {y}]")
            self.range = (x, y)
        if not self.equality and self.range is None:
            raise QueryError("a query needs an equality predicate or a range")
        if self.order_by is not None:
            name, direction = self.order_by
            if name not in FIELDS or direction not in ("asc", "desc"):
                raise QueryError(f"bad ordering {self.order_by!r}")

    @classmethod
    def parse(cls, eq: Sequence[str] = (), range: str | None = None,
              order: str | None = None) -> "Query":
        """Build from CLI tokens: ``field=value``, ``lo..hi``, ``field:asc|desc``."""
        pairs = []
        for token in eq:
            name, sep, raw = token.partition("=")
            if not sep:
                raise QueryError(f"expected field=value, got {token!r}")
            try:
                pairs.append((name.strip(), coerce_field(name.strip(), raw)))
            except (KeyError, ValueError) as exc:
                raise QueryError(str(exc)) from None
        bounds = None
        if range is not None:
            lo, sep, hi = range.partition("..")
            if not sep or not lo.strip().isdigit() or not hi.strip().isdigit():
                raise QueryError(f"expected lo..hi, got {range!r}")
            bounds = (int(lo), int(hi))
        ordering = None
        if order is not None:
            name, _, direction = order.partition(":")
            ordering = (name.strip(), (direction or "asc").strip().lower())
        return cls(pairs, bounds, ordering)

    def matches(self, r: LogRecord) -> bool:
        if self.range is not None and not self.range[0] <= r.timestamp <= self.range[1]:
            return False
        return all(getattr(r, name) == value for name, value in self.equality.items())


@dataclass
class ScanStats:
    buckets_fetched: int = 0
    records_fetched: int = 0
    records_scanned: int = 0
    records_discarded: int = 0
    batch_txs_touched: int = 0
    records_repaired: int = 0


@dataclass(frozen=True)
class RecoveryEvent:
    dictionary: str
    key: str
    batch_size: int
    regular_count: int
    gap: int
    method: str  # "suffix" when the last `gap` regular items were the missing ones


@dataclass
class QueryResult:
    records: list[LogRecord]
    stats: ScanStats
    plan: str
    recoveries: list[RecoveryEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)


def sort_results(records: Sequence[LogRecord], name: str, direction: str = "asc") -> list[LogRecord]:
    """Stable sort on one field; equal keys keep their input order in both directions."""
    if name not in FIELDS:
        raise QueryError(f"unknown field {name!r}")
    return sorted(records, key=lambda r: getattr(r, name), reverse=direction == "desc")


class QueryEngine:
    """One node's ingest path and query planner.

    ``sync`` must seal (and replicate) whatever this engine has written;
    the engine calls it before reading and after repairs. Ingest and
    anything that can repair are single-threaded per node.
    """

    def __init__(self, streams: StreamNode, config: EngineConfig | None = None, *,
                 sync: Callable[[], None] | None = None, epoch: int = 0):
        self.streams = streams
        self.config = config or EngineConfig()
        self.sync = sync or self._seal_locally
        self.origin = streams.node_id
        self.epoch = epoch
        self._seq = 0
        self.buffer: list[tuple[LogRecord, bytes]] = []
        self.recovery_log: list[RecoveryEvent] = []
        self._last_recoveries: list[RecoveryEvent] = []

    def _seal_locally(self) -> None:
        if self.streams.ledger.pending:
            self.streams.seal()

    def create_layout(self) -> None:
        for name in layout():
            self.streams.create_dictionary(name)

    def bucket_key(self, t: int) -> int:
        return t // self.config.bucket_size

    def _keys(self, r: LogRecord) -> list[tuple[DictionaryPair, str]]:
        keys = [(PAIRS[name], canonical_key(getattr(r, name))) for name in FIELDS]
        keys.append((PAIRS[RANGE], canonical_key(self.bucket_key(r.timestamp))))
        return keys

    # ingest

    def ingest(self, r: LogRecord) -> bool:
        """Write ``r`` to every regular dictionary, then buffer it. True if a flush ran."""
        value = encode_record(r) + _TAG.pack(self.origin, self.epoch & 0xFFFFFFFF, self._seq)
        self._seq += 1
        for pair, key in self._keys(r):
            self.streams.insert(pair.regular, value, key)
        self.buffer.append((r, value))
        if len(self.buffer) >= self.config.buffer_size:
            return self.flush()
        return False

    def flush(self) -> bool:
        if not self.buffer:
            return False
        per_dict = {}
        for r, value in self.buffer:
            for pair, key in self._keys(r):
                per_dict.setdefault(pair.batch, []).append((value, key))
        limit = self.streams.ledger.max_tx_bytes
        for name, items in per_dict.items():
            size = payload_size(StreamItem(name, k, v) for v, k in items)
            if size > limit:
                raise BufferTooLarge(
                    f"{len(items)} buffered records need {size} bytes in {name}, limit {limit}")
        for name, items in per_dict.items():
            self.streams.insert_batch(name, items)
        self.buffer.clear()
        return True

    def discard_buffer(self) -> int:
        """Simulated crash: buffered records vanish (their regular copies remain)."""
        lost = len(self.buffer)
        self.buffer = []
        return lost

    # retrieval with crash recovery

    def _fetch(self, pair: DictionaryPair, key: str, stats: ScanStats) -> list[tuple[tuple, bytes]]:
        streams = self.streams
        items = [(prov.order, value)
                 for value, prov in streams.retrieve_with_provenance(pair.batch, key)]
        touched = {order[:2] for order, _ in items}
        regular_count = streams.get_count(pair.regular, key)
        gap = regular_count - len(items)
        if gap < 0:
            raise NegativeGap(f"{pair.batch}[{key}] holds {len(items)} values, "
                              f"{pair.regular} only {regular_count}")
        if gap > 0:
            missing, method = self._missing(pair, key, items, gap)
            streams.insert_batch(pair.batch, [(v, key) for v in missing])
            event = RecoveryEvent(pair.batch, key, len(items), regular_count, gap, method)
            self.recovery_log.append(event)
            logger.info("recovered %d records into %s[%s] (%s)", len(missing), pair.batch, key, method)
            base = len(self.recovery_log)
            items += [((_PENDING_HEIGHT, base, i), v) for i, v in enumerate(missing)]
            touched.add((_PENDING_HEIGHT, base))
            stats.records_repaired += len(missing)
            self._last_recoveries.append(event)
        stats.batch_txs_touched += len(touched)
        stats.records_fetched += len(items)
        return items

    def _missing(self, pair: DictionaryPair, key: str, items, gap: int) -> tuple[list[bytes], str]:
        present: dict[bytes, int] = {}
        for _, value in items:
            present[value[-_TAG.size:]] = present.get(value[-_TAG.size:], 0) + 1
        tail = self.streams.last_n(pair.regular, key, gap)
        if all(v[-_TAG.size:] not in present for v in tail):
            return tail, "suffix"
        # lost records are not the newest ones; diff by ingest tag instead
        missing = []
        for value in self.streams.retrieve(pair.regular, key):
            tag = value[-_TAG.size:]
            if present.get(tag):
                present[tag] -= 1
            else:
                missing.append(value)
        return missing, "diff"

    def retrieve_with_recovery(self, name: str, key: str) -> list[LogRecord]:
        """Batch-tier list for ``key`` of field ``name`` (or ``"range"``), repaired if short."""
        self._last_recoveries = []
        items = self._fetch(PAIRS[name], key, ScanStats())
        if self._last_recoveries:
            self.sync()
        return [_decode(v) for _, v in items]

    # queries

    def execute(self, q: Query) -> QueryResult:
        self.flush()
        self.sync()
        self._last_recoveries = []
        if q.range is None:
            result = self._equality_path(q)
        elif not q.equality:
            result = self._range_path(q)
        else:
            result = self._combined(q)
        if self._last_recoveries:
            self.sync()
        result.recoveries = list(self._last_recoveries)
        if q.order_by is not None:
            result.records = sort_results(result.records, *q.order_by)
        return result

    def conjunctive_query(self, predicates: Mapping | Iterable, order_by=None) -> QueryResult:
        return self.execute(Query(predicates, None, order_by))

    def range_query(self, x: int, y: int, order_by=None) -> QueryResult:
        return self.execute(Query({}, (x, y), order_by))

    def combined_query(self, q: Query) -> QueryResult:
        return self.execute(q)

    def most_restrictive(self, equality: Mapping) -> tuple[str, int]:
        """(field, regular-tier count) with the fewest records; ties go to the earlier field."""
        best = None
        for name in FIELDS:
            if name in equality:
                n = self.streams.get_count(PAIRS[name].regular, canonical_key(equality[name]))
                if best is None or n < best[1]:
                    best = (name, n)
        return best

    def bucket_span(self, x: int, y: int) -> list[int]:
        """Bucket ids between x's and y's buckets that hold anything, ascending."""
        lo, hi = self.bucket_key(x), self.bucket_key(y)
        keys = self.streams.list_keys(PAIRS[RANGE].regular)
        if hi - lo + 1 <= len(keys):
            return list(range(lo, hi + 1))
        return sorted(b for b in map(int, keys) if lo <= b <= hi)

    def range_cost(self, x: int, y: int) -> int:
        regular = PAIRS[RANGE].regular
        return sum(self.streams.get_count(regular, canonical_key(b)) for b in self.bucket_span(x, y))

    def _equality_path(self, q: Query, plan_prefix: str = "") -> QueryResult:
        stats = ScanStats()
        name, _ = self.most_restrictive(q.equality)
        items = self._fetch(PAIRS[name], canonical_key(q.equality[name]), stats)
        records = [_decode(v) for _, v in items]
        if len(q.equality) > 1 or q.range is not None:
            stats.records_scanned = len(records)
            kept = [r for r in records if q.matches(r)]
            stats.records_discarded = len(records) - len(kept)
            records = kept
        return QueryResult(records, stats, f"{plan_prefix}equality:{name}")

    def _range_path(self, q: Query, plan_prefix: str = "") -> QueryResult:
        stats = ScanStats()
        x, y = q.range
        lo, hi = self.bucket_key(x), self.bucket_key(y)
        equality = list(q.equality.items())
        collected = []
        for b in self.bucket_span(x, y):
            items = self._fetch(PAIRS[RANGE], canonical_key(b), stats)
            stats.buckets_fetched += 1
            boundary = b == lo or b == hi
            if not boundary and not equality:
                # interior buckets lie wholly inside [x, y]
                collected += ((order, _decode(v)) for order, v in items)
                continue
            for order, value in items:
                r = _decode(value)
                stats.records_scanned += 1
                if (boundary and not x <= r.timestamp <= y) or any(
                        getattr(r, f) != v for f, v in equality):
                    stats.records_discarded += 1
                    continue
                collected.append((order, r))
        collected.sort(key=lambda pair: pair[0])
        return QueryResult([r for _, r in collected], stats, f"{plan_prefix}range")

    def _combined(self, q: Query) -> QueryResult:
        _, eq_cost = self.most_restrictive(q.equality)
        if eq_cost <= self.range_cost(*q.range):
            return self._equality_path(q, "combined:")
        return self._range_path(q, "combined:")


def _decode(value: bytes) -> LogRecord:
    return decode_record(value[:-_TAG.size])


def ingest_tag(value: bytes) -> tuple[int, int, int]:
    return _TAG.unpack(value[-_TAG.size:])
