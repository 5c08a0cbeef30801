"""Fixed-width feature vectors from HTTP log records.

Layout (in order):

* embedded: 13 slots x d, the mean embedding of the tokens of one
  (field, category) pair, zeros when the slot has no tokens;
* numerical (11): log1p(request_len), log1p(response_len), trans_depth,
  version, UA browser major/minor version, and presence flags for host, uri,
  referer, user agent and method;
* IP: first three octets, one-hot over 256 values each (768);
* port: top ``port_slots - 1`` training ports plus OTHER;
* UA device / browser / OS, method, status, content type: one-hot over the
  training values plus OTHER.  Absent categorical fields leave their block
  all-zero.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .embed import EmbeddingModel, embed_token
from .errors import ConfigError, ContractError
from .logmodel import Label, LogRecord
from .tokenizer import Category, TokenSentence, tokenize_domain, tokenize_referer, tokenize_url

C = Category
EMBED_SLOTS: tuple[tuple[str, Category], ...] = (
    ("domain", C.SUBDOMAIN),
    ("domain", C.DOMAIN),
    ("domain", C.TLD),
    ("url", C.PATH),
    ("url", C.FILENAME),
    ("url", C.EXTENSION),
    ("url", C.QUERY_KEY),
    ("url", C.QUERY_VALUE),
    ("referer", C.DOMAIN),
    ("referer", C.TLD),
    ("referer", C.PATH),
    ("referer", C.FILENAME),
    ("referer", C.QUERY_KEY),
)
NUMERIC_FEATURES = (
    "log_request_len",
    "log_response_len",
    "trans_depth",
    "version",
    "ua_browser_major",
    "ua_browser_minor",
    "has_host",
    "has_uri",
    "has_referer",
    "has_ua",
    "has_method",
)
IP_BLOCK = 768
OTHER = "__OTHER__"
GROUPS = ("Domain_URL", "UA_Referer", "External_Host", "HTTP_Metadata", "All")


# --- user agent parsing -------------------------------------------------------

_BROWSERS = (
    ("Edge", re.compile(r"Edg(?:e|A|iOS)?/(\d+)(?:\.(\d+))?")),
    ("Opera", re.compile(r"(?:OPR|Opera)/(\d+)(?:\.(\d+))?")),
    ("Chrome", re.compile(r"(?:Chrome|CriOS)/(\d+)(?:\.(\d+))?")),
    ("Firefox", re.compile(r"(?:Firefox|FxiOS)/(\d+)(?:\.(\d+))?")),
    ("IE", re.compile(r"MSIE (\d+)(?:\.(\d+))?")),
    ("IE", re.compile(r"Trident/\d+.*rv:(\d+)(?:\.(\d+))?")),
    ("Safari", re.compile(r"Version/(\d+)(?:\.(\d+))?.*Safari/")),
    ("curl", re.compile(r"curl/(\d+)(?:\.(\d+))?")),
    ("Wget", re.compile(r"Wget/(\d+)(?:\.(\d+))?")),
    ("python-requests", re.compile(r"python-requests/(\d+)(?:\.(\d+))?")),
    ("Go-http-client", re.compile(r"Go-http-client/(\d+)(?:\.(\d+))?")),
    ("Java", re.compile(r"Java/(\d+)(?:\.(\d+))?")),
)
_OSES = (
    ("Windows", re.compile(r"Windows")),
    ("iOS", re.compile(r"iPhone|iPad|iPod")),
    ("Mac OS X", re.compile(r"Mac OS X|Macintosh")),
    ("Android", re.compile(r"Android")),
    ("Linux", re.compile(r"Linux|X11")),
)
_BOT = re.compile(r"bot|crawl|spider|slurp", re.I)
_TABLET = re.compile(r"iPad|Tablet")
_MOBILE = re.compile(r"Mobile|iPhone|Android")
_LIBRARY = {"curl", "Wget", "python-requests", "Go-http-client", "Java"}


@dataclass(frozen=True)
class UserAgentInfo:
    device: str
    browser: str
    os: str
    major: float
    minor: float


def parse_user_agent(ua: str | None) -> UserAgentInfo | None:
    """Regex-table parse of a UA string into device, browser, OS and version."""
    if not ua:
        return None
    browser, major, minor = "Other", 0.0, 0.0
    for name, pattern in _BROWSERS:
        m = pattern.search(ua)
        if m:
            browser = name
            major = float(m.group(1))
            minor = float(m.group(2) or 0)
            break
    os_name = next((name for name, pattern in _OSES if pattern.search(ua)), "Other")
    if _BOT.search(ua):
        device = "Bot"
    elif _TABLET.search(ua):
        device = "Tablet"
    elif _MOBILE.search(ua):
        device = "Mobile"
    elif browser in _LIBRARY or os_name == "Other":
        device = "Other"
    else:
        device = "Desktop"
    return UserAgentInfo(device, browser, os_name, major, minor)


# --- layout -------------------------------------------------------------------


def _vocab_from_counts(counts: Counter) -> list:
    return sorted(counts, key=lambda v: (-counts[v], str(v)))


@dataclass
class FeatureLayout:
    d: int
    port_slots: int
    port_vocab: list[int]
    ua_device_vocab: list[str]
    ua_browser_vocab: list[str]
    ua_os_vocab: list[str]
    method_vocab: list[str]
    status_vocab: list[int]
    ctype_vocab: list[str]
    embedded_categories: tuple[tuple[str, Category], ...] = EMBED_SLOTS
    _offsets: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.port_slots < 2:
            raise ConfigError("port_slots must be >= 2")
        if len(self.port_vocab) > self.port_slots - 1:
            raise ConfigError("port vocabulary larger than port_slots - 1")
        self.embedded_categories = tuple((f, Category(c)) for f, c in self.embedded_categories)
        widths = [
            ("embedded", self.d * len(self.embedded_categories)),
            ("numeric", len(NUMERIC_FEATURES)),
            ("ip", IP_BLOCK),
            ("port", self.port_slots),
            ("ua_device", len(self.ua_device_vocab) + 1),
            ("ua_browser", len(self.ua_browser_vocab) + 1),
            ("ua_os", len(self.ua_os_vocab) + 1),
            ("method", len(self.method_vocab) + 1),
            ("status", len(self.status_vocab) + 1),
            ("ctype", len(self.ctype_vocab) + 1),
        ]
        start = 0
        for name, width in widths:
            self._offsets[name] = (start, start + width)
            start += width
        self._index = {
            "port": {p: i for i, p in enumerate(self.port_vocab)},
            "ua_device": {v: i for i, v in enumerate(self.ua_device_vocab)},
            "ua_browser": {v: i for i, v in enumerate(self.ua_browser_vocab)},
            "ua_os": {v: i for i, v in enumerate(self.ua_os_vocab)},
            "method": {v: i for i, v in enumerate(self.method_vocab)},
            "status": {v: i for i, v in enumerate(self.status_vocab)},
            "ctype": {v: i for i, v in enumerate(self.ctype_vocab)},
        }

    @property
    def total_dim(self) -> int:
        return self._offsets["ctype"][1]

    def block(self, name: str) -> slice:
        start, stop = self._offsets[name]
        return slice(start, stop)

    def slot(self, source_field: str, category: Category) -> slice:
        i = self.embedded_categories.index((source_field, Category(category)))
        return slice(i * self.d, (i + 1) * self.d)

    def numeric_index(self, name: str) -> int:
        return self._offsets["numeric"][0] + NUMERIC_FEATURES.index(name)

    def one_hot_index(self, block: str, value) -> int | None:
        """Position of ``value`` in a categorical block (OTHER if unseen)."""
        if value is None:
            return None
        start, stop = self._offsets[block]
        idx = self._index[block].get(value)
        return start + (idx if idx is not None else stop - start - 1)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "port_slots": self.port_slots,
            "port_vocab": self.port_vocab,
            "ua_device_vocab": self.ua_device_vocab,
            "ua_browser_vocab": self.ua_browser_vocab,
            "ua_os_vocab": self.ua_os_vocab,
            "method_vocab": self.method_vocab,
            "status_vocab": self.status_vocab,
            "ctype_vocab": self.ctype_vocab,
            "embedded_categories": [[f, c.value] for f, c in self.embedded_categories],
            "total_dim": self.total_dim,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureLayout":
        layout = cls(
            d=obj["d"],
            port_slots=obj["port_slots"],
            port_vocab=list(obj["port_vocab"]),
            ua_device_vocab=list(obj["ua_device_vocab"]),
            ua_browser_vocab=list(obj["ua_browser_vocab"]),
            ua_os_vocab=list(obj["ua_os_vocab"]),
            method_vocab=list(obj["method_vocab"]),
            status_vocab=list(obj["status_vocab"]),
            ctype_vocab=list(obj["ctype_vocab"]),
            embedded_categories=tuple((f, Category(c)) for f, c in obj["embedded_categories"]),
        )
        if "total_dim" in obj and obj["total_dim"] != layout.total_dim:
            raise ConfigError("layout file total_dim does not match its vocabularies")
        return layout

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureLayout":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_layout(records: Sequence[LogRecord], model: EmbeddingModel, port_slots: int = 100) -> FeatureLayout:
    """Categorical vocabularies from training records, most frequent first."""
    if not records:
        raise ConfigError("cannot fit a feature layout on an empty training set")
    if port_slots < 2:
        raise ConfigError("port_slots must be >= 2")
    ports, devices, browsers, oses = Counter(), Counter(), Counter(), Counter()
    methods, statuses, ctypes = Counter(), Counter(), Counter()
    for r in records:
        ports[r.external_port] += 1
        ua = parse_user_agent(r.user_agent)
        if ua is not None:
            devices[ua.device] += 1
            browsers[ua.browser] += 1
            oses[ua.os] += 1
        if r.method:
            methods[r.method] += 1
        statuses[r.status_code] += 1
        if r.content_type:
            ctypes[r.content_type] += 1
    return FeatureLayout(
        d=model.d,
        port_slots=port_slots,
        port_vocab=_vocab_from_counts(ports)[: port_slots - 1],
        ua_device_vocab=_vocab_from_counts(devices),
        ua_browser_vocab=_vocab_from_counts(browsers),
        ua_os_vocab=_vocab_from_counts(oses),
        method_vocab=_vocab_from_counts(methods),
        status_vocab=_vocab_from_counts(statuses),
        ctype_vocab=_vocab_from_counts(ctypes),
    )


@dataclass
class FeatureVector:
    values: np.ndarray
    label: Label = Label.UNLABELED
    record_id: str | None = None


class Featurizer:
    """Featurizes records against a fixed layout and embedding model.

    Per-field slot embeddings are memoized by field string, which makes
    repeated hosts and URLs cheap.  Instances are safe to share read-only.
    """

    def __init__(self, layout: FeatureLayout, model: EmbeddingModel, suffixes: frozenset[str] | None = None):
        if layout.d != model.d:
            raise ContractError(f"layout d={layout.d} but embedding d={model.d}")
        self.layout = layout
        self.model = model
        self.suffixes = suffixes
        self._field_cache: dict[tuple[str, str], np.ndarray] = {}
        self._slots_by_field = {
            name: [(i, c) for i, (f, c) in enumerate(layout.embedded_categories) if f == name]
            for name in ("domain", "url", "referer")
        }

    def _sentence(self, source: str, text: str) -> TokenSentence:
        if source == "domain":
            return tokenize_domain(text, self.suffixes)
        if source == "url":
            return tokenize_url(text)
        return tokenize_referer(text, self.suffixes)

    def _field_embedding(self, source: str, text: str | None) -> np.ndarray | None:
        if not text or not text.strip():
            return None
        key = (source, text)
        cached = self._field_cache.get(key)
        if cached is not None:
            return cached
        slots = self._slots_by_field[source]
        d = self.layout.d
        out = np.zeros(len(slots) * d)
        sentence = self._sentence(source, text)
        for j, (_, category) in enumerate(slots):
            tokens = sentence.of(category)
            if tokens:
                out[j * d : (j + 1) * d] = np.mean([embed_token(self.model, t) for t in tokens], axis=0)
        if len(self._field_cache) > 500_000:
            self._field_cache.clear()
        self._field_cache[key] = out
        return out

    def vector(self, record: LogRecord) -> np.ndarray:
        L = self.layout
        d = L.d
        x = np.zeros(L.total_dim)
        for source, text in (("domain", record.host), ("url", record.uri), ("referer", record.referer)):
            emb = self._field_embedding(source, text)
            if emb is None:
                continue
            for j, (i, _) in enumerate(self._slots_by_field[source]):
                x[i * d : (i + 1) * d] = emb[j * d : (j + 1) * d]
        ua = parse_user_agent(record.user_agent)
        n0 = L.block("numeric").start
        x[n0 : n0 + len(NUMERIC_FEATURES)] = [
            math.log1p(record.request_len),
            math.log1p(record.response_len),
            record.trans_depth,
            record.version,
            ua.major if ua else 0.0,
            ua.minor if ua else 0.0,
            1.0 if record.host else 0.0,
            1.0 if record.uri else 0.0,
            1.0 if record.referer else 0.0,
            1.0 if record.user_agent else 0.0,
            1.0 if record.method else 0.0,
        ]
        ip0 = L.block("ip").start
        for k, octet in enumerate(record.external_ip.split(".")[:3]):
            x[ip0 + 256 * k + int(octet)] = 1.0
        hits = [
            L.one_hot_index("port", record.external_port),
            L.one_hot_index("method", record.method),
            L.one_hot_index("status", record.status_code),
            L.one_hot_index("ctype", record.content_type),
        ]
        if ua is not None:
            hits += [
                L.one_hot_index("ua_device", ua.device),
                L.one_hot_index("ua_browser", ua.browser),
                L.one_hot_index("ua_os", ua.os),
            ]
        for h in hits:
            if h is not None:
                x[h] = 1.0
        return x

    def transform(self, records: Iterable[LogRecord], dtype=np.float32) -> np.ndarray:
        rows = [self.vector(r) for r in records]
        if not rows:
            return np.zeros((0, self.layout.total_dim), dtype=dtype)
        return np.asarray(rows, dtype=dtype)


def featurize(record: LogRecord, layout: FeatureLayout, model: EmbeddingModel) -> FeatureVector:
    values = Featurizer(layout, model).vector(record)
    return FeatureVector(values, record.label, record.uid)


def group_mask(layout: FeatureLayout, group: str) -> np.ndarray:
    """Boolean mask of the dimensions belonging to a feature group."""
    if group not in GROUPS:
        raise ConfigError(f"unknown feature group {group!r}; expected one of {GROUPS}")
    mask = np.zeros(layout.total_dim, dtype=bool)
    if group == "All":
        mask[:] = True
        return mask
    if group == "Domain_URL":
        for f, c in layout.embedded_categories:
            if f in ("domain", "url"):
                mask[layout.slot(f, c)] = True
    elif group == "UA_Referer":
        for f, c in layout.embedded_categories:
            if f == "referer":
                mask[layout.slot(f, c)] = True
        for block in ("ua_device", "ua_browser", "ua_os"):
            mask[layout.block(block)] = True
        mask[layout.numeric_index("ua_browser_major")] = True
        mask[layout.numeric_index("ua_browser_minor")] = True
    elif group == "External_Host":
        mask[layout.block("ip")] = True
        mask[layout.block("port")] = True
    elif group == "HTTP_Metadata":
        for block in ("method", "status", "ctype"):
            mask[layout.block(block)] = True
        for name in ("trans_depth", "log_request_len", "log_response_len"):
            mask[layout.numeric_index(name)] = True
    return mask


def select_feature_group(vector: FeatureVector, group: str, layout: FeatureLayout) -> FeatureVector:
    """Zero every dimension outside ``group``; ``All`` returns the input unchanged."""
    if group == "All":
        return vector
    masked = np.where(group_mask(layout, group), vector.values, 0.0)
    return FeatureVector(masked, vector.label, vector.record_id)


# --- lexical baseline -----------------------------------------------------------

LEXICAL_FEATURES = tuple(
    f"{part}_{stat}" for part in ("domain", "path", "query") for stat in ("length", "entropy", "digits", "letters")
)


def _entropy(text: str) -> float:
    if not text:
        return 0.0
    counts = Counter(text)
    n = len(text)
    return -sum(c / n * math.log2(c / n) for c in counts.values())


def lexical_features(record: LogRecord) -> np.ndarray:
    """12 lexical statistics (length, entropy, digit and letter counts per URL part)."""
    uri = record.uri or ""
    path, _, query = uri.partition("?")
    out = []
    for text in (record.host or "", path, query):
        out += [
            float(len(text)),
            _entropy(text),
            float(sum(ch.isdigit() for ch in text)),
            float(sum(ch.isalpha() for ch in text)),
        ]
    return np.asarray(out)
