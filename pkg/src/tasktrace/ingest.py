"""Parsing of OpTC-style and LANL-style telemetry into event records.

Both schemas end up as :class:`EventRecord`. LANL process events carry no
actor/object identifiers, so they are synthesized from process name and id
which lets the same tree construction run over either source.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

OPTC_COLUMNS = (
    "id",
    "object",
    "action",
    "pid",
    "ppid",
    "actorid",
    "objectid",
    "principal",
    "file_path",
    "image_path",
    "parent_image_path",
    "timestamp",
    "malicious",
)
_OPTC_REQUIRED = ("object", "action", "pid", "ppid", "actorid", "objectid", "timestamp")
_MISSING = {"", "nan", "none", "null", "NaN", "None", "NULL"}

LANL_ACTION = "EVENT"
_LANL_ALIASES = {
    "EventID": ("EventID", "eventid", "event_id"),
    "ProcessID": ("ProcessID", "processid", "pid"),
    "ParentProcessID": ("ParentProcessID", "parentprocessid", "ppid"),
    "ProcessName": ("ProcessName", "processname"),
    "ParentProcessName": ("ParentProcessName", "parentprocessname"),
    "user": ("UserName", "user", "User", "username"),
    "timestamp": ("Time", "timestamp", "time"),
}


class MalformedLine(ValueError):
    """A telemetry line that cannot be turned into an event."""

    def __init__(self, message: str, line_number: int | None = None) -> None:
        self.line_number = line_number
        where = f"line {line_number}: " if line_number is not None else ""
        super().__init__(where + message)


class UnsupportedEventID(MalformedLine):
    """LANL record without the parent/child process fields."""


class EmptyStream(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class EventRecord:
    record_id: str
    object: str
    action: str
    pid: int
    ppid: int
    actor_id: str
    object_id: str
    timestamp: int  # microseconds since the epoch, UTC
    ingest_ordinal: int
    principal: str | None = None
    file_path: str | None = None
    image_path: str | None = None
    parent_image_path: str | None = None
    malicious: bool = False

    @property
    def pair(self) -> tuple[str, str]:
        return (self.object, self.action)

    @property
    def sort_key(self) -> tuple[int, int]:
        return (self.timestamp, self.ingest_ordinal)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EventRecord":
        return cls(**d)

    def to_optc_row(self) -> dict:
        """Row keyed by the OpTC column names, as consumed by ``parse_optc_line``."""
        return {
            "id": self.record_id,
            "object": self.object,
            "action": self.action,
            "pid": self.pid,
            "ppid": self.ppid,
            "actorid": self.actor_id,
            "objectid": self.object_id,
            "principal": self.principal if self.principal is not None else "nan",
            "file_path": self.file_path if self.file_path is not None else "nan",
            "image_path": self.image_path if self.image_path is not None else "nan",
            "parent_image_path": (
                self.parent_image_path if self.parent_image_path is not None else "nan"
            ),
            "timestamp": format_timestamp(self.timestamp),
            "malicious": int(self.malicious),
        }


_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
# fromisoformat on 3.10 only takes 3 or 6 fractional digits
_FRACTION = re.compile(r"\.(\d+)")


def parse_timestamp(value) -> int:
    """Microseconds since the epoch for ``YYYY-MM-DD HH:MM:SS[.ffffff]`` (UTC)
    or a numeric epoch value in seconds."""
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if not math.isfinite(value):
            raise ValueError(f"non-finite timestamp {value!r}")
        return int(round(value * 1_000_000))
    text = str(value).strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return int(round(float(text) * 1_000_000))
    except ValueError:
        pass
    text = _FRACTION.sub(lambda m: "." + m.group(1).ljust(6, "0")[:6], text.replace("Z", "+00:00"))
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    delta = dt - _EPOCH
    return (delta.days * 86_400 + delta.seconds) * 1_000_000 + delta.microseconds


def format_timestamp(micros: int) -> str:
    dt = datetime.fromtimestamp(micros // 1_000_000, tz=timezone.utc).replace(
        microsecond=micros % 1_000_000
    )
    return dt.strftime("%Y-%m-%d %H:%M:%S.%f")


def _clean(value) -> str | None:
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    text = str(value).strip()
    return None if text in _MISSING else text


def _to_int(value, field: str) -> int:
    text = _clean(value)
    if text is None:
        raise ValueError(f"missing {field}")
    try:
        return int(text, 0)
    except ValueError:
        return int(float(text))


def _label(value) -> bool:
    text = _clean(value)
    if text is None:
        return False
    return text.lower() in {"1", "true", "yes", "1.0"}


def _split_line(line: str, header: Sequence[str]) -> dict:
    stripped = line.strip()
    if stripped.startswith("{"):
        obj = json.loads(stripped)
        if not isinstance(obj, dict):
            raise ValueError("JSON record is not an object")
        return obj
    values = next(csv.reader([stripped]))
    if len(values) < len(header):
        raise ValueError(f"expected {len(header)} columns, got {len(values)}")
    return dict(zip(header, values))


def parse_optc_line(
    line: str, ordinal: int, header: Sequence[str] = OPTC_COLUMNS, line_number: int | None = None
) -> EventRecord:
    """Parse one OpTC record (CSV row in ``header`` order, or a JSON object)."""
    if not line or not line.strip():
        raise MalformedLine("empty line", line_number)
    try:
        row = _split_line(line, header)
        for name in _OPTC_REQUIRED:
            if _clean(row.get(name)) is None:
                raise ValueError(f"missing {name}")
        return EventRecord(
            record_id=_clean(row.get("id")) or str(ordinal),
            object=_clean(row["object"]),
            action=_clean(row["action"]),
            pid=_to_int(row["pid"], "pid"),
            ppid=_to_int(row["ppid"], "ppid"),
            actor_id=_clean(row["actorid"]),
            object_id=_clean(row["objectid"]),
            timestamp=parse_timestamp(row["timestamp"]),
            ingest_ordinal=ordinal,
            principal=_clean(row.get("principal")),
            file_path=_clean(row.get("file_path")),
            image_path=_clean(row.get("image_path")),
            parent_image_path=_clean(row.get("parent_image_path")),
            malicious=_label(row.get("malicious")),
        )
    except MalformedLine:
        raise
    except (ValueError, KeyError, TypeError, csv.Error) as exc:
        raise MalformedLine(str(exc), line_number) from exc


def _lanl_get(row: dict, field: str):
    for alias in _LANL_ALIASES[field]:
        if alias in row:
            return row[alias]
    return None


def parse_lanl_line(
    line: str, ordinal: int, header: Sequence[str] | None = None, line_number: int | None = None
) -> EventRecord:
    """Parse one LANL host event.

    The process fields become a filiation pair: ``object_id`` is
    ProcessName/ProcessID and ``actor_id`` is ParentProcessName/ParentProcessID.
    """
    if not line or not line.strip():
        raise MalformedLine("empty line", line_number)
    try:
        row = _split_line(line, header or ())
    except (ValueError, csv.Error) as exc:
        raise MalformedLine(str(exc), line_number) from exc

    event_id = _clean(_lanl_get(row, "EventID"))
    if event_id is None:
        raise MalformedLine("missing EventID", line_number)
    proc = {f: _clean(_lanl_get(row, f)) for f in ("ProcessID", "ParentProcessID")}
    names = {f: _clean(_lanl_get(row, f)) for f in ("ProcessName", "ParentProcessName")}
    if proc["ProcessID"] is None or proc["ParentProcessID"] is None:
        raise UnsupportedEventID(f"EventID {event_id} has no filiation fields", line_number)
    try:
        pid = _to_int(proc["ProcessID"], "ProcessID")
        ppid = _to_int(proc["ParentProcessID"], "ParentProcessID")
        ts_raw = _lanl_get(row, "timestamp")
        if _clean(ts_raw) is None:
            raise ValueError("missing timestamp")
        timestamp = parse_timestamp(ts_raw)
    except (ValueError, TypeError) as exc:
        raise MalformedLine(str(exc), line_number) from exc
    name = names["ProcessName"] or "?"
    parent_name = names["ParentProcessName"] or "?"
    return EventRecord(
        record_id=str(ordinal),
        object=str(event_id),
        action=LANL_ACTION,
        pid=pid,
        ppid=ppid,
        actor_id=f"{parent_name}:{ppid}",
        object_id=f"{name}:{pid}",
        timestamp=timestamp,
        ingest_ordinal=ordinal,
        principal=_clean(_lanl_get(row, "user")),
        image_path=names["ProcessName"],
        parent_image_path=names["ParentProcessName"],
        malicious=False,
    )


@dataclass
class ParseStats:
    parsed: int = 0
    malformed: int = 0
    unsupported: int = 0


def _open_text(path: Path) -> io.TextIOBase:
    if path.suffix == ".gz":
        return gzip.open(path, "rt", encoding="utf-8", newline="")
    return open(path, "r", encoding="utf-8", newline="")


def iter_records(
    lines: Iterable[str], schema: str = "optc", stats: ParseStats | None = None, start: int = 0
) -> Iterator[EventRecord]:
    """Parse a line stream, skipping and counting bad lines.

    A first line that does not start with ``{`` is taken as a CSV header.
    """
    if schema not in ("optc", "lanl"):
        raise ValueError(f"unknown schema {schema!r}")
    stats = stats if stats is not None else ParseStats()
    parse = parse_optc_line if schema == "optc" else parse_lanl_line
    header: Sequence[str] | None = OPTC_COLUMNS if schema == "optc" else None
    ordinal = start
    for number, line in enumerate(lines, start=1):
        if number == 1 and line.strip() and not line.lstrip().startswith("{"):
            header = [h.strip().lower() if schema == "optc" else h.strip()
                      for h in next(csv.reader([line.strip()]))]
            continue
        if not line.strip():
            continue
        try:
            record = parse(line, ordinal, header, line_number=number)
        except UnsupportedEventID as exc:
            stats.unsupported += 1
            logger.debug("skipped %s", exc)
            continue
        except MalformedLine as exc:
            stats.malformed += 1
            logger.warning("skipped malformed record, %s", exc)
            continue
        stats.parsed += 1
        ordinal += 1
        yield record


def read_events(path: str | Path, schema: str = "optc") -> tuple[list[EventRecord], ParseStats]:
    """Read a CSV or JSON-lines file (optionally gzipped) into sorted records."""
    path = Path(path)
    stats = ParseStats()
    with _open_text(path) as fh:
        records = list(iter_records(fh, schema, stats))
    return sort_events(records), stats


def sort_events(records: Iterable[EventRecord]) -> list[EventRecord]:
    """Total order used everywhere: timestamp, then input order."""
    return sorted(records, key=lambda r: r.sort_key)


def group_by_user(records: Iterable[EventRecord]) -> dict[str, list[EventRecord]]:
    users: dict[str, list[EventRecord]] = {}
    for r in records:
        users.setdefault(r.principal or "", []).append(r)
    return users


def write_events_jsonl(records: Iterable[EventRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def read_events_jsonl(path: str | Path) -> list[EventRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [EventRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_optc_csv(records: Iterable[EventRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=OPTC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow(r.to_optc_row())


@dataclass
class KeyVocabulary:
    """Dense integer keys for (object, action) pairs, in first-seen order."""

    key_of: dict[tuple[str, str], int]
    name_of: list[tuple[str, str]]

    @property
    def n(self) -> int:
        return len(self.name_of)

    @property
    def unknown(self) -> int:
        """Sentinel key for pairs never seen in training."""
        return self.n

    def to_json(self) -> dict:
        return {"n": self.n, "keys": [list(p) for p in self.name_of]}

    @classmethod
    def from_json(cls, obj: dict) -> "KeyVocabulary":
        names = [tuple(p) for p in obj["keys"]]
        if obj.get("n", len(names)) != len(names):
            raise ValueError("vocabulary n does not match key list")
        return cls({p: i for i, p in enumerate(names)}, names)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "KeyVocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(records: Iterable[EventRecord]) -> KeyVocabulary:
    key_map: dict[tuple[str, str], int] = {}
    names: list[tuple[str, str]] = []
    for r in records:
        if r.pair not in key_map:
            key_map[r.pair] = len(names)
            names.append(r.pair)
    if not names:
        raise EmptyStream("cannot build a vocabulary from an empty stream")
    return KeyVocabulary(key_map, names)


def key_of(record: EventRecord, vocab: KeyVocabulary) -> int:
    return vocab.key_of.get(record.pair, vocab.n)
