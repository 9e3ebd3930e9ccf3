"""Access-log records: schema, binary codec, CSV files and a synthetic generator.

CSV layout (UTF-8, one record per line)::

    timestamp,node,id,ref_id,user,activity,resource
    1522257730000,3,12,40345,7,read,TOPMed

Binary layout of one record, all integers big-endian::

    u64 timestamp | u64 node | u64 id | u64 ref_id | u64 user
    u16 len | activity (utf-8) | u16 len | resource (utf-8)
"""

from __future__ import annotations

import csv
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

FIELDS = ("timestamp", "node", "id", "ref_id", "user", "activity", "resource")
INT_FIELDS = frozenset(FIELDS[:5])
STR_FIELDS = frozenset(FIELDS[5:])
HEADER = ",".join(FIELDS)

_INTS = struct.Struct(">5Q")
_U16 = struct.Struct(">H")
_MAX_INT = 2**64 - 1


class RecordError(ValueError):
    """A record violates the log schema."""


class DecodeError(ValueError):
    pass


class MissingHeader(ValueError):
    pass


class MalformedRow(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class LogRecord:
    timestamp: int
    node: int
    id: int
    ref_id: int
    user: int
    activity: str
    resource: str

    def __post_init__(self):
        for name in FIELDS[:5]:
            value = getattr(self, name)
            if type(value) is not int:
                raise RecordError(f"{name} must be an int, got {value!r}")
            if not 1 <= value <= _MAX_INT:
                raise RecordError(f"{name} must be a positive 64-bit integer, got {value}")
        for name in FIELDS[5:]:
            value = getattr(self, name)
            if not isinstance(value, str) or not value:
                raise RecordError(f"{name} must be a non-empty string")
            if any(c in ',"' or not c.isprintable() for c in value):
                raise RecordError(f"{name} may not contain commas, quotes or control characters: {value!r}")
            if value != value.strip():
                raise RecordError(f"{name} may not have surrounding whitespace: {value!r}")
            if len(value.encode("utf-8")) > 0xFFFF:
                raise RecordError(f"{name} is too long")

    def get(self, name: str) -> int | str:
        return getattr(self, name)

    def as_tuple(self) -> tuple:
        return (self.timestamp, self.node, self.id, self.ref_id, self.user, self.activity, self.resource)

    def to_csv_row(self) -> str:
        return ",".join(str(v) for v in self.as_tuple())


def coerce_field(name: str, raw: str) -> int | str:
    """Parse the textual form of a field value (CLI and CSV share this)."""
    if name not in FIELDS:
        raise KeyError(f"unknown field {name!r}; expected one of {', '.join(FIELDS)}")
    raw = raw.strip()
    if name in INT_FIELDS:
        if not (raw.isascii() and raw.isdigit()):
            raise ValueError(f"{name} must be a positive integer, got {raw!r}")
        return int(raw)
    return raw


def canonical_key(value: int | str) -> str:
    """Render a field value as a dictionary key (decimal, no leading zeros)."""
    return str(value)


def encode_record(r: LogRecord) -> bytes:
    activity = r.activity.encode("utf-8")
    resource = r.resource.encode("utf-8")
    return b"".join((
        _INTS.pack(r.timestamp, r.node, r.id, r.ref_id, r.user),
        _U16.pack(len(activity)), activity,
        _U16.pack(len(resource)), resource,
    ))


def decode_record(data: bytes) -> LogRecord:
    try:
        ints = _INTS.unpack_from(data, 0)
        off = _INTS.size
        (n,) = _U16.unpack_from(data, off)
        off += 2
        activity = data[off:off + n]
        if len(activity) != n:
            raise DecodeError("truncated activity")
        off += n
        (n,) = _U16.unpack_from(data, off)
        off += 2
        resource = data[off:off + n]
        if len(resource) != n:
            raise DecodeError("truncated resource")
        off += n
    except struct.error as exc:
        raise DecodeError(f"truncated record: {exc}") from None
    if off != len(data):
        raise DecodeError(f"{len(data) - off} trailing bytes after record")
    try:
        return LogRecord(*ints, activity.decode("utf-8"), resource.decode("utf-8"))
    except (UnicodeDecodeError, RecordError) as exc:
        raise DecodeError(str(exc)) from None


def parse_row(values: list[str], line: int) -> LogRecord:
    if len(values) != len(FIELDS):
        raise MalformedRow(line, f"expected {len(FIELDS)} columns, got {len(values)}")
    try:
        parsed = [coerce_field(name, raw) for name, raw in zip(FIELDS, values)]
        return LogRecord(*parsed)
    except (ValueError, RecordError) as exc:
        raise MalformedRow(line, str(exc)) from None


def parse_log_file(path: str | Path) -> list[LogRecord]:
    """Read a log CSV. Raises MalformedRow naming the first bad line (1-based)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != list(FIELDS):
            raise MissingHeader(f"{path}: expected header {HEADER!r}")
        records = []
        try:
            for row in reader:
                if not row:
                    continue
                records.append(parse_row(row, reader.line_num))
        except csv.Error as exc:
            raise MalformedRow(reader.line_num, str(exc)) from None
    return records


def write_log_file(path: str | Path, records: Iterable[LogRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(HEADER + "\n")
        for r in records:
            fh.write(r.to_csv_row() + "\n")


# Named values so that the standard queries (resource = 'TOPMed', ...) hit
# something; pools extend with numbered names past these.
ACTIVITIES = ("read", "write", "update", "delete", "share", "download", "query", "export")
RESOURCES = (
    "TOPMed", "MOD_WormBase", "dbGaP", "ClinVar", "ENCODE", "GTEx",
    "1000Genomes", "UKBiobank", "gnomAD", "TCGA", "HapMap", "ExAC",
)
INT_BASES = {"node": 1, "id": 1, "ref_id": 40000, "user": 1}

DEFAULT_CARDINALITIES = {
    "node": 4,
    "id": 100_000,
    "ref_id": 500,
    "user": 10,
    "activity": 4,
    "resource": 10,
}


@dataclass(frozen=True)
class GeneratorSpec:
    record_count: int
    timestamp_range: tuple[int, int] = (1_522_000_000_000, 1_523_000_000_000)
    cardinalities: dict = field(default_factory=lambda: dict(DEFAULT_CARDINALITIES))
    seed: int = 0
    # pin a field to one value, e.g. {"node": 3} for a per-site file
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        lo, hi = self.timestamp_range
        if self.record_count < 0:
            raise ValueError("record_count must be non-negative")
        if not 1 <= lo <= hi:
            raise ValueError(f"bad timestamp range {self.timestamp_range}")
        for name, c in self.cardinalities.items():
            if name not in FIELDS or name == "timestamp":
                raise ValueError(f"no cardinality for field {name!r}")
            if c < 1:
                raise ValueError(f"cardinality of {name} must be >= 1")


def value_pool(name: str, cardinality: int) -> list:
    if name in INT_FIELDS:
        base = INT_BASES[name]
        return list(range(base, base + cardinality))
    named = ACTIVITIES if name == "activity" else RESOURCES
    pool = list(named[:cardinality])
    pool.extend(f"{name}{i}" for i in range(len(pool), cardinality))
    return pool


def generate(spec: GeneratorSpec) -> list[LogRecord]:
    """Deterministic synthetic trail: uniform timestamps, categorical pools."""
    rng = random.Random(spec.seed)
    lo, hi = spec.timestamp_range
    cards = {**DEFAULT_CARDINALITIES, **spec.cardinalities}
    pools = {name: value_pool(name, cards[name]) for name in FIELDS[1:]}
    records = []
    for _ in range(spec.record_count):
        values = {"timestamp": rng.randint(lo, hi)}
        for name in FIELDS[1:]:
            values[name] = rng.choice(pools[name])
        values.update(spec.fixed)
        records.append(LogRecord(**values))
    return records

