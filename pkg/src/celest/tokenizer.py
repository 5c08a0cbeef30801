"""Split domains, URLs and referers into category-tagged tokens.

Each text field becomes a "sentence" of tokens whose category records where in
the URL the token came from, so the embedding model sees URL structure.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable
from urllib.parse import unquote, urlsplit

from .errors import ContractError

_SCHEME = re.compile(r"^[a-z][a-z0-9+.-]*://")


class Category(str, enum.Enum):
    SUBDOMAIN = "SUBDOMAIN"
    DOMAIN = "DOMAIN"
    TLD = "TLD"
    PATH = "PATH"
    FILENAME = "FILENAME"
    EXTENSION = "EXTENSION"
    QUERY_KEY = "QUERY_KEY"
    QUERY_VALUE = "QUERY_VALUE"
    FRAGMENT = "FRAGMENT"


SOURCE_FIELDS = ("domain", "url", "referer")


@dataclass(frozen=True)
class Token:
    text: str
    category: Category

    def __post_init__(self) -> None:
        if not self.text:
            raise ContractError("token text must be non-empty")
        if not isinstance(self.category, Category):
            object.__setattr__(self, "category", Category(self.category))


@dataclass(frozen=True)
class TokenSentence:
    tokens: tuple[Token, ...]
    source_field: str

    def __len__(self) -> int:
        return len(self.tokens)

    def __iter__(self):
        return iter(self.tokens)

    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def of(self, category: Category) -> list[Token]:
        return [t for t in self.tokens if t.category is category]


def load_suffix_list(path: str | Path) -> frozenset[str]:
    """Public-suffix style list, one suffix per line (``//`` comments allowed)."""
    suffixes = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip().lower().lstrip("*.!").strip(".")
        if line and not line.startswith("//"):
            suffixes.add(line)
    return frozenset(suffixes)


def _split_host(host: str) -> str:
    host = host.strip().lower()
    if host.startswith("[") or host.count(":") > 1:
        return host  # IPv6 literal: leave as a single label
    return host.split(":", 1)[0].strip(".")


def _domain_tokens(host: str, suffixes: frozenset[str] | None) -> list[Token]:
    labels = [l for l in _split_host(host).split(".") if l]
    if not labels:
        return []
    if len(labels) == 1:
        return [Token(labels[0], Category.DOMAIN)]
    n_suffix = 1
    if suffixes:
        # longest listed suffix that still leaves a registrable label
        for k in range(len(labels) - 1, 1, -1):
            if ".".join(labels[-k:]) in suffixes:
                n_suffix = k
                break
    tld = ".".join(labels[-n_suffix:])
    rest = labels[:-n_suffix]
    tokens = [Token(l, Category.SUBDOMAIN) for l in rest[:-1]]
    tokens.append(Token(rest[-1], Category.DOMAIN))
    tokens.append(Token(tld, Category.TLD))
    return tokens


def tokenize_domain(host: str, suffixes: frozenset[str] | None = None) -> TokenSentence:
    """``c2.evil.example.com`` -> SUBDOMAIN c2, SUBDOMAIN evil, DOMAIN example, TLD com."""
    if not host or not host.strip():
        raise ContractError("host must be non-empty")
    return TokenSentence(tuple(_domain_tokens(host, suffixes)), "domain")


def _path_tokens(path: str) -> list[Token]:
    segments = [s for s in path.split("/") if s]
    if not segments:
        return []
    tokens = [Token(s, Category.PATH) for s in segments[:-1]]
    last = segments[-1]
    stem, dot, ext = last.rpartition(".")
    if dot and stem and ext:
        tokens.append(Token(stem, Category.FILENAME))
        tokens.append(Token(ext, Category.EXTENSION))
    else:
        tokens.append(Token(last, Category.FILENAME))
    return tokens


def _query_tokens(query: str) -> list[Token]:
    tokens = []
    for pair in query.split("&"):
        if not pair:
            continue
        key, eq, value = pair.partition("=")
        if key:
            tokens.append(Token(key, Category.QUERY_KEY))
        if value:
            tokens.append(Token(value, Category.QUERY_VALUE))
    return tokens


def _url_tokens(uri: str) -> list[Token]:
    text = unquote(uri).lower()
    if _SCHEME.match(text):
        try:
            parts = urlsplit(text)
            text = parts.path + ("?" + parts.query if parts.query else "")
            text += "#" + parts.fragment if parts.fragment else ""
        except ValueError:
            return [Token(text, Category.PATH)]
    rest, hashmark, fragment = text.partition("#")
    path, qmark, query = rest.partition("?")
    tokens = _path_tokens(path) + _query_tokens(query)
    if fragment:
        tokens.append(Token(fragment, Category.FRAGMENT))
    if not tokens and text.strip("/?#&="):
        tokens.append(Token(text, Category.PATH))
    return tokens


def tokenize_url(uri: str) -> TokenSentence:
    """Path segments, filename/extension, query keys/values and fragment.

    ``%XX`` escapes are decoded once before splitting.  Absolute URLs (as
    seen in proxy logs) have their scheme and authority dropped.
    """
    if not uri:
        return TokenSentence((), "url")
    return TokenSentence(tuple(_url_tokens(uri)), "url")


def tokenize_referer(referer: str, suffixes: frozenset[str] | None = None) -> TokenSentence:
    """Referer URL: domain tokens of its authority followed by its URL tokens."""
    if not referer:
        return TokenSentence((), "referer")
    text = referer.strip()
    if "://" not in text:
        text = "http://" + text
    try:
        parts = urlsplit(text)
        host = parts.hostname or ""
    except ValueError:
        return TokenSentence((Token(referer.lower(), Category.PATH),), "referer")
    tokens = _domain_tokens(host, suffixes) if host else []
    tail = parts.path + ("?" + parts.query if parts.query else "")
    tail += "#" + parts.fragment if parts.fragment else ""
    tokens += _url_tokens(tail) if tail else []
    return TokenSentence(tuple(tokens), "referer")


def char_ngrams(token: Token | str, nmin: int, nmax: int) -> list[str]:
    """Character n-grams of ``<text>`` for lengths nmin..nmax, plus ``<text>``.

    Ordered by length then position; duplicates are kept.  The wrapped token
    is appended only if it was not already produced as an n-gram.
    """
    text = token.text if isinstance(token, Token) else token
    if not text:
        raise ContractError("token text must be non-empty")
    if not 1 <= nmin <= nmax:
        raise ContractError(f"need 1 <= nmin <= nmax, got {nmin}, {nmax}")
    wrapped = f"<{text}>"
    length = len(wrapped)
    grams = [wrapped[i : i + n] for n in range(nmin, min(nmax, length) + 1) for i in range(length - n + 1)]
    if length > nmax:
        grams.append(wrapped)
    return grams


def ngram_count(text_len: int, nmin: int, nmax: int) -> int:
    """Closed form for ``len(char_ngrams(...))`` of a token of ``text_len`` chars."""
    length = text_len + 2
    total = sum(max(0, length - n + 1) for n in range(nmin, nmax + 1))
    return total + (1 if length > nmax else 0)


def sentences_for_record(record, suffixes: frozenset[str] | None = None) -> list[TokenSentence]:
    """Domain, URL and referer sentences of a log record (empty ones dropped)."""
    out = []
    if record.host:
        out.append(tokenize_domain(record.host, suffixes))
    if record.uri:
        out.append(tokenize_url(record.uri))
    if record.referer:
        out.append(tokenize_referer(record.referer, suffixes))
    return [s for s in out if len(s)]


def corpus_from_records(records: Iterable, suffixes: frozenset[str] | None = None) -> list[TokenSentence]:
    corpus: list[TokenSentence] = []
    for r in records:
        corpus.extend(sentences_for_record(r, suffixes))
    return corpus
