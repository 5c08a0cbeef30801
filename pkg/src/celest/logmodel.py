"""HTTP log records: parsing, serialization, popularity filtering, IoC labeling.

The TSV layout follows Zeek's ``http.log`` conventions: tab separated, ``-``
for an unset field, ``(empty)`` for an empty string and an optional
``#fields`` header naming the columns.  When a header is present columns are
mapped by name, so genuine Zeek files (with the extra ``id.orig_*`` columns)
parse as well.  Without a header the default column order below is assumed.
"""

from __future__ import annotations

import dataclasses
import enum
import ipaddress
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import ConfigError, IngestionError

logger = logging.getLogger(__name__)


class Label(str, enum.Enum):
    BENIGN = "Benign"
    MALICIOUS = "Malicious"
    UNLABELED = "Unlabeled"


@dataclass(frozen=True)
class LogRecord:
    """One HTTP transaction seen at the network border.

    ``uid`` is Zeek's connection uid and doubles as the record identifier used
    by the ground-truth oracle and the active-learning audit log.
    """

    timestamp: float
    external_ip: str
    external_port: int
    method: str | None = None
    host: str | None = None
    uri: str | None = None
    referer: str | None = None
    user_agent: str | None = None
    status_code: int = 0
    content_type: str | None = None
    request_len: int = 0
    response_len: int = 0
    trans_depth: int = 0
    version: float = 1.1
    label: Label = Label.UNLABELED
    family: str | None = None
    uid: str | None = None

    def __post_init__(self) -> None:
        try:
            ipaddress.IPv4Address(self.external_ip)
        except (ipaddress.AddressValueError, ValueError) as exc:
            raise ValueError(f"external_ip {self.external_ip!r} is not IPv4") from exc
        if not 0 <= self.external_port <= 65535:
            raise ValueError(f"external_port out of range: {self.external_port}")
        if not 0 <= self.status_code <= 999:
            raise ValueError(f"status_code out of range: {self.status_code}")
        if self.request_len < 0 or self.response_len < 0 or self.trans_depth < 0:
            raise ValueError("lengths and trans_depth must be non-negative")
        if not isinstance(self.label, Label):
            object.__setattr__(self, "label", Label(self.label))
        if self.family and self.label is not Label.MALICIOUS:
            raise ValueError("family may only be set on Malicious records")


@dataclass(frozen=True)
class IndicatorSet:
    """Indicators of compromise used to label traffic."""

    domains: frozenset[str] = frozenset()
    ips: frozenset[str] = frozenset()
    url_substrings: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        for name in ("domains", "ips", "url_substrings"):
            values = frozenset(v.strip().lower() for v in getattr(self, name))
            if "" in values:
                raise ValueError(f"empty entry in indicator {name}")
            object.__setattr__(self, name, values)

    def matches(self, record: LogRecord) -> bool:
        if record.host and record.host.lower() in self.domains:
            return True
        if record.external_ip in self.ips:
            return True
        if record.uri and self.url_substrings:
            uri = record.uri.lower()
            return any(s in uri for s in self.url_substrings)
        return False


# (column name, LogRecord attribute).  The first 14 form the base layout.
BASE_COLUMNS: tuple[tuple[str, str], ...] = (
    ("ts", "timestamp"),
    ("id.resp_h", "external_ip"),
    ("id.resp_p", "external_port"),
    ("method", "method"),
    ("host", "host"),
    ("uri", "uri"),
    ("referrer", "referer"),
    ("version", "version"),
    ("user_agent", "user_agent"),
    ("request_body_len", "request_len"),
    ("response_body_len", "response_len"),
    ("status_code", "status_code"),
    ("trans_depth", "trans_depth"),
    ("resp_mime_types", "content_type"),
)
EXTRA_COLUMNS: tuple[tuple[str, str], ...] = (
    ("uid", "uid"),
    ("label", "label"),
    ("family", "family"),
)
ALL_COLUMNS = BASE_COLUMNS + EXTRA_COLUMNS
_COLUMN_TO_ATTR = dict(ALL_COLUMNS)
_REQUIRED_ATTRS = ("timestamp", "external_ip", "external_port")

_INT_ATTRS = {"external_port", "status_code", "request_len", "response_len", "trans_depth"}
_FLOAT_ATTRS = {"timestamp", "version"}
_INT_DEFAULTS = {"status_code": 0, "request_len": 0, "response_len": 0, "trans_depth": 0}

UNSET = "-"
EMPTY = "(empty)"
FORMATS = ("tsv", "jsonl")


@dataclass
class ParsedLog:
    """Records parsed from one file plus a tally of rejected lines."""

    records: list[LogRecord] = field(default_factory=list)
    malformed: int = 0
    malformed_lines: list[int] = field(default_factory=list)

    def __iter__(self) -> Iterator[LogRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


_HEX_ESCAPE = re.compile(r"\\x([0-9a-f]{2})")


def _escape(value: str) -> str:
    """Zeek-style escaping; values spelled like a marker get their first byte hex-escaped."""
    if value == "":
        return EMPTY
    value = value.replace("\\", "\\x5c").replace("\t", "\\x09").replace("\n", "\\x0a")
    if value in (UNSET, EMPTY):
        value = f"\\x{ord(value[0]):02x}{value[1:]}"
    return value


def _unescape(value: str) -> str:
    if value == EMPTY:
        return ""
    return _HEX_ESCAPE.sub(lambda m: chr(int(m.group(1), 16)), value)


def _coerce(attr: str, raw: str | None):
    if raw is None or raw == UNSET:
        if attr in _INT_DEFAULTS:
            return _INT_DEFAULTS[attr]
        if attr in _REQUIRED_ATTRS:
            raise ValueError(f"required field {attr} is unset")
        if attr == "version":
            return 0.0
        if attr == "label":
            return Label.UNLABELED
        return None
    if attr in _INT_ATTRS:
        return int(raw)
    if attr in _FLOAT_ATTRS:
        return float(raw)
    if attr == "label":
        return Label(raw)
    if attr == "content_type":
        # Zeek logs a set of mime types; keep the first.
        return _unescape(raw).split(",")[0]
    return _unescape(raw)


def _record_from_mapping(values: dict[str, object]) -> LogRecord:
    kwargs = {attr: _coerce(attr, values.get(attr)) for attr in _COLUMN_TO_ATTR.values()}
    return LogRecord(**kwargs)


def _parse_tsv(lines: Iterable[str], result: ParsedLog) -> None:
    columns: list[str] | None = None
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line:
            continue
        if line.startswith("#"):
            if line.startswith("#fields"):
                columns = line.split("\t")[1:]
            continue
        parts = line.split("\t")
        try:
            if columns is not None:
                if len(parts) != len(columns):
                    raise ValueError("column count mismatch")
                values = {
                    _COLUMN_TO_ATTR[name]: raw
                    for name, raw in zip(columns, parts)
                    if name in _COLUMN_TO_ATTR
                }
            else:
                if len(parts) not in (len(BASE_COLUMNS), len(ALL_COLUMNS)):
                    raise ValueError(f"expected {len(BASE_COLUMNS)} columns, got {len(parts)}")
                values = {attr: raw for (_, attr), raw in zip(ALL_COLUMNS, parts)}
            result.records.append(_record_from_mapping(values))
        except (ValueError, TypeError):
            result.malformed += 1
            result.malformed_lines.append(lineno)


def _parse_jsonl(lines: Iterable[str], result: ParsedLog) -> None:
    attrs = set(_COLUMN_TO_ATTR.values())
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
            kwargs = {k: v for k, v in obj.items() if k in attrs}
            for attr in _REQUIRED_ATTRS:
                if kwargs.get(attr) is None:
                    raise ValueError(f"missing {attr}")
            for attr in _INT_ATTRS:
                if attr in kwargs:
                    v = kwargs[attr]
                    if v is None:
                        kwargs[attr] = _INT_DEFAULTS.get(attr, 0)
                    elif isinstance(v, bool) or not isinstance(v, int):
                        raise ValueError(f"{attr} must be an integer")
            for attr in _FLOAT_ATTRS:
                if attr in kwargs:
                    kwargs[attr] = float(kwargs[attr])
            if kwargs.get("label") is None:
                kwargs.pop("label", None)
            result.records.append(LogRecord(**kwargs))
        except (ValueError, TypeError):
            result.malformed += 1
            result.malformed_lines.append(lineno)


def parse_log_file(path: str | Path, format: str = "tsv") -> ParsedLog:
    """Parse a TSV or JSONL HTTP log; malformed lines are tallied and skipped."""
    if format not in FORMATS:
        raise ConfigError(f"unknown log format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestionError(f"cannot read log file {path}: {exc}") from exc
    result = ParsedLog()
    if format == "tsv":
        _parse_tsv(lines, result)
    else:
        _parse_jsonl(lines, result)
    if result.malformed:
        logger.warning("%s: skipped %d malformed line(s)", path, result.malformed)
    return result


def _tsv_value(attr: str, value: object) -> str:
    if value is None:
        return UNSET
    if isinstance(value, Label):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    return _escape(str(value))


def record_to_tsv(record: LogRecord) -> str:
    return "\t".join(_tsv_value(attr, getattr(record, attr)) for _, attr in ALL_COLUMNS)


def record_to_json(record: LogRecord) -> dict:
    out = dataclasses.asdict(record)
    out["label"] = record.label.value
    return out


def write_log_file(records: Iterable[LogRecord], path: str | Path, format: str = "tsv") -> int:
    """Serialize records; returns the number written."""
    if format not in FORMATS:
        raise ConfigError(f"unknown log format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", encoding="utf-8") as fh:
        if format == "tsv":
            fh.write("#separator \\x09\n")
            fh.write("#fields\t" + "\t".join(name for name, _ in ALL_COLUMNS) + "\n")
            for record in records:
                fh.write(record_to_tsv(record) + "\n")
                n += 1
        else:
            for record in records:
                fh.write(json.dumps(record_to_json(record), sort_keys=True) + "\n")
                n += 1
    return n


def filter_popular(
    records: Sequence[LogRecord], popular_domains: Iterable[str], contact_threshold: int
) -> list[LogRecord]:
    """Drop records to popular domains and to hosts contacted too often.

    Hosts are counted within ``records`` (one analysis window); a host seen
    strictly more than ``contact_threshold`` times is removed entirely.
    """
    if contact_threshold <= 0:
        raise ConfigError("contact_threshold must be positive")
    popular = {d.lower() for d in popular_domains}
    kept = [r for r in records if not (r.host and r.host.lower() in popular)]
    counts = Counter(r.host.lower() for r in kept if r.host)
    return [r for r in kept if not (r.host and counts[r.host.lower()] > contact_threshold)]


def apply_indicators(records: Sequence[LogRecord], indicators: IndicatorSet) -> list[LogRecord]:
    """Relabel records matching an indicator as Malicious."""
    out = []
    for r in records:
        if r.label is not Label.MALICIOUS and indicators.matches(r):
            r = dataclasses.replace(r, label=Label.MALICIOUS)
        out.append(r)
    return out


def load_indicators(path: str | Path) -> IndicatorSet:
    """Read an indicator file with ``domain:``, ``ip:`` and ``url:`` lines."""
    buckets: dict[str, set[str]] = {"domain": set(), "ip": set(), "url": set()}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read indicator file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, sep, value = line.partition(":")
        kind = kind.strip().lower()
        if not sep or kind not in buckets or not value.strip():
            raise ConfigError(f"{path}:{lineno}: bad indicator line {line!r}")
        buckets[kind].add(value.strip().lower())
    return IndicatorSet(
        domains=frozenset(buckets["domain"]),
        ips=frozenset(buckets["ip"]),
        url_substrings=frozenset(buckets["url"]),
    )


def load_domain_list(path: str | Path) -> set[str]:
    """Popular-domain list: one domain per line, or Tranco-style ``rank,domain``."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read domain list {path}: {exc}") from exc
    out = set()
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        out.add(line.split(",")[-1].strip().lower())
    return out
