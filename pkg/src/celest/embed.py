"""CBOW token embeddings with negative sampling, whole-token or hashed n-gram.

Two vocabularies are supported:

* ``whole_token``: a shared vocabulary agreed on up front.  Clients send token
  counts, the server sums them and keeps tokens at or above ``min_count``.
* ``ngram_hashed``: every token is represented by its character n-grams hashed
  (FNV-1a 64) into ``bucket_count`` rows, so no vocabulary is exchanged and
  unseen tokens still get a vector.  The output (context-prediction) vector of
  a token is the row of its wrapped form ``<text>`` in the output table.

Federated training is sequential: the model visits each client in a fixed
order, every round, and each client runs one CBOW epoch over its own corpus.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from ._rng import fnv1a64
from .errors import ConfigError, ContractError, IngestionError
from .tokenizer import Token, TokenSentence, char_ngrams

WHOLE_TOKEN = "whole_token"
NGRAM_HASHED = "ngram_hashed"
MODES = (WHOLE_TOKEN, NGRAM_HASHED)

_MAGIC = b"CELEMB1\n"
_ROUND_SEED_STRIDE = 1_000_003


@dataclass
class Vocabulary:
    entries: dict[str, int] = field(default_factory=dict)
    min_count: int = 2
    mode: str = WHOLE_TOKEN
    bucket_count: int = 0
    counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown vocabulary mode {self.mode!r}")
        if self.mode == NGRAM_HASHED and self.bucket_count <= 0:
            raise ConfigError("bucket_count must be positive in ngram mode")
        if self.mode == WHOLE_TOKEN and sorted(self.entries.values()) != list(range(len(self.entries))):
            raise ConfigError("whole-token vocabulary indices must be dense")

    @classmethod
    def hashed(cls, bucket_count: int = 2**20) -> "Vocabulary":
        return cls(mode=NGRAM_HASHED, bucket_count=bucket_count, min_count=1)

    @property
    def rows(self) -> int:
        return self.bucket_count if self.mode == NGRAM_HASHED else len(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, token: str) -> bool:
        return token in self.entries


def token_frequencies(corpus: Iterable[TokenSentence]) -> Counter:
    """Client-side token counts; the only thing sent for vocabulary building."""
    return Counter(t.text for sentence in corpus for t in sentence)


def build_vocab_federated(client_freqs: Sequence[Mapping[str, int]], min_count: int = 2) -> Vocabulary:
    """Sum client token counts and keep tokens with total >= ``min_count``.

    Indices are assigned by descending total count, ties broken
    lexicographically, so the result does not depend on client order.
    """
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    totals: Counter = Counter()
    for freqs in client_freqs:
        for token, count in freqs.items():
            totals[token] += int(count)
    kept = sorted((t for t, c in totals.items() if c >= min_count), key=lambda t: (-totals[t], t))
    return Vocabulary(
        entries={t: i for i, t in enumerate(kept)},
        min_count=min_count,
        mode=WHOLE_TOKEN,
        counts={t: totals[t] for t in kept},
    )


@dataclass
class EmbeddingModel:
    vocab: Vocabulary
    input_vectors: np.ndarray
    output_vectors: np.ndarray
    window: int = 5
    nmin: int = 3
    nmax: int = 6
    neg_samples: int = 5
    lr: float = 0.025
    _ids: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.input_vectors.ndim != 2 or self.input_vectors.shape != self.output_vectors.shape:
            raise ContractError("input/output tables must be 2-D with equal shapes")
        if self.input_vectors.shape[0] != self.vocab.rows:
            raise ContractError("table rows do not match the vocabulary")
        if self.d <= 0 or self.window < 1:
            raise ConfigError("need d > 0 and window >= 1")
        if not 1 <= self.nmin <= self.nmax:
            raise ConfigError("need 1 <= nmin <= nmax")

    @classmethod
    def create(
        cls,
        vocab: Vocabulary,
        d: int = 32,
        window: int = 5,
        nmin: int = 3,
        nmax: int = 6,
        neg_samples: int = 5,
        lr: float = 0.025,
        seed: int = 0,
    ) -> "EmbeddingModel":
        """Input rows uniform in +-0.5/d, output rows zero (word2vec init)."""
        rng = np.random.default_rng(seed)
        rows = vocab.rows
        inp = ((rng.random((rows, d), dtype=np.float32) - 0.5) / d).astype(np.float32)
        out = np.zeros((rows, d), dtype=np.float32)
        return cls(vocab, inp, out, window, nmin, nmax, neg_samples, lr)

    @property
    def d(self) -> int:
        return self.input_vectors.shape[1]

    @property
    def mode(self) -> str:
        return self.vocab.mode

    def copy(self) -> "EmbeddingModel":
        clone = EmbeddingModel(
            self.vocab,
            self.input_vectors.copy(),
            self.output_vectors.copy(),
            self.window,
            self.nmin,
            self.nmax,
            self.neg_samples,
            self.lr,
        )
        clone._ids = self._ids  # id lookup depends only on vocab and n-gram settings
        return clone

    def token_ids(self, text: str) -> tuple[np.ndarray, int] | None:
        """(input rows, output row) for a token text, or None if out of vocabulary."""
        hit = self._ids.get(text)
        if hit is not None or text in self._ids:
            return hit
        if self.mode == WHOLE_TOKEN:
            idx = self.vocab.entries.get(text)
            ids = None if idx is None else (np.array([idx], dtype=np.int64), idx)
        else:
            b = self.vocab.bucket_count
            rows = np.array([fnv1a64(g) % b for g in char_ngrams(text, self.nmin, self.nmax)], dtype=np.int64)
            ids = (rows, fnv1a64(f"<{text}>") % b)
        self._ids[text] = ids
        return ids


class NegativeSampler:
    """Draws ids with probability proportional to count**0.75."""

    def __init__(self, ids: Sequence[int], counts: Sequence[float], power: float = 0.75):
        self.ids = np.asarray(ids, dtype=np.int64)
        weights = np.asarray(counts, dtype=np.float64) ** power
        if len(self.ids) == 0 or weights.sum() <= 0:
            raise ContractError("negative sampler needs at least one id with positive count")
        self.probs = weights / weights.sum()
        self._cdf = np.cumsum(self.probs)
        self._cdf[-1] = 1.0

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.ids[np.searchsorted(self._cdf, rng.random(size), side="right")]


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(_log_sigmoid(x))


def context_weights(context: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten context words into (rows, weights) so that h = weights @ table[rows].

    The context vector is the mean over context words of each word's vector,
    itself the mean of its rows (a single row in whole-token mode).
    """
    rows = np.concatenate(context)
    weights = np.concatenate([np.full(len(c), 1.0 / (len(context) * len(c))) for c in context])
    return rows, weights


def cbow_loss_and_grads(
    input_table: np.ndarray,
    output_table: np.ndarray,
    context: Sequence[np.ndarray],
    target: int,
    negatives: Sequence[int],
):
    """Negative-sampling CBOW loss for one center token and its gradients.

    loss = -log s(u_t . h) - sum_k log s(-u_k . h)

    Returns ``(loss, in_rows, in_grads, out_rows, out_grads)`` where the grads
    are per listed row (rows may repeat; callers accumulate with ``np.add.at``).
    """
    in_rows, weights = context_weights(context)
    h = weights @ input_table[in_rows].astype(np.float64)
    out_rows = np.concatenate([[target], np.asarray(negatives, dtype=np.int64)]).astype(np.int64)
    u = output_table[out_rows].astype(np.float64)
    scores = u @ h
    signs = np.ones(len(out_rows))
    signs[1:] = -1.0
    loss = -float(np.sum(_log_sigmoid(signs * scores)))
    g = _sigmoid(scores)
    g[0] -= 1.0  # dloss/dscore
    grad_h = g @ u
    out_grads = g[:, None] * h[None, :]
    in_grads = weights[:, None] * grad_h[None, :]
    return loss, in_rows, in_grads, out_rows, out_grads


def _encode(model: EmbeddingModel, corpus: Iterable[TokenSentence]) -> list[list[tuple[np.ndarray, int]]]:
    encoded = []
    for sentence in corpus:
        words = [ids for ids in (model.token_ids(t.text) for t in sentence) if ids is not None]
        if len(words) >= 2:
            encoded.append(words)
    return encoded


def train_cbow_epoch(
    model: EmbeddingModel,
    corpus: Iterable[TokenSentence],
    seed: int,
    lr: float | None = None,
    inplace: bool = False,
) -> EmbeddingModel:
    """One sequential pass of CBOW negative-sampling updates over ``corpus``.

    Negatives are drawn from the unigram**0.75 distribution of the output rows
    of this corpus; a negative equal to the center token is skipped.  Output is
    bit-identical for identical (model, corpus, seed, lr).
    """
    m = model if inplace else model.copy()
    lr = m.lr if lr is None else lr
    sentences = _encode(m, corpus)
    n_centers = sum(len(s) for s in sentences)
    if n_centers == 0:
        return m
    counts = Counter(out for s in sentences for _, out in s)
    ids = sorted(counts)
    sampler = NegativeSampler(ids, [counts[i] for i in ids])
    rng = np.random.default_rng(seed)
    negatives = sampler.draw(rng, (n_centers, m.neg_samples))
    inp, out, w = m.input_vectors, m.output_vectors, m.window
    k = 0
    for words in sentences:
        for i, (_, target) in enumerate(words):
            negs = negatives[k]
            k += 1
            negs = negs[negs != target]
            context = [words[j][0] for j in range(max(0, i - w), min(len(words), i + w + 1)) if j != i]
            _, in_rows, in_grads, out_rows, out_grads = cbow_loss_and_grads(inp, out, context, target, negs)
            np.add.at(out, out_rows, -lr * out_grads)
            np.add.at(inp, in_rows, -lr * in_grads)
    return m


def decayed_lr(base_lr: float, round_index: int, rounds: int) -> float:
    """Linear decay across rounds: round 1 uses ``base_lr``."""
    return base_lr * max(1.0 - (round_index - 1) / rounds, 1e-4)


ClientUpdate = Callable[[EmbeddingModel, int, float], EmbeddingModel]


def corpus_client(corpus: Sequence[TokenSentence], seed: int) -> ClientUpdate:
    """Wrap a local corpus as an opaque client callback ``(model, round, lr) -> model``."""
    corpus = list(corpus)

    def update(model: EmbeddingModel, round_index: int, lr: float) -> EmbeddingModel:
        return train_cbow_epoch(model, corpus, seed + (round_index - 1) * _ROUND_SEED_STRIDE, lr=lr)

    return update


def federated_embed_train(
    clients: Sequence[ClientUpdate], rounds: int, model0: EmbeddingModel
) -> EmbeddingModel:
    """Round-robin sequential training: each client updates the shared model in turn.

    The protocol only handles models and callbacks, never client corpora.
    """
    if not clients:
        raise ConfigError("federated embedding training needs at least one client")
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    model = model0
    for r in range(1, rounds + 1):
        lr = decayed_lr(model0.lr, r, rounds)
        for client in clients:
            model = client(model, r, lr)
    return model


def embed_token(model: EmbeddingModel, token: Token | str) -> np.ndarray:
    """Token vector; zeros for out-of-vocabulary tokens in whole-token mode."""
    text = token.text if isinstance(token, Token) else token
    ids = model.token_ids(text) if text else None
    if ids is None:
        return np.zeros(model.d)
    return model.input_vectors[ids[0]].astype(np.float64).mean(axis=0)


def save_embedding(model: EmbeddingModel, path: str | Path) -> None:
    """Write the model: magic, u64 header length, JSON header, float32 tables."""
    vocab = model.vocab
    ordered = sorted(vocab.entries, key=vocab.entries.get)
    header = {
        "mode": vocab.mode,
        "d": model.d,
        "rows": vocab.rows,
        "window": model.window,
        "nmin": model.nmin,
        "nmax": model.nmax,
        "neg_samples": model.neg_samples,
        "lr": model.lr,
        "bucket_count": vocab.bucket_count,
        "min_count": vocab.min_count,
        "vocab": [[t, vocab.counts.get(t, 0)] for t in ordered],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(model.input_vectors, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.output_vectors, dtype="<f4").tobytes())


def load_embedding(path: str | Path) -> EmbeddingModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read embedding model {path}: {exc}") from exc
    if not raw.startswith(_MAGIC):
        raise IngestionError(f"{path} is not an embedding model file")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    rows, d = header["rows"], header["d"]
    size = rows * d * 4
    if len(raw) != pos + 2 * size:
        raise IngestionError(f"{path}: truncated vector tables")
    inp = np.frombuffer(raw, dtype="<f4", count=rows * d, offset=pos).reshape(rows, d).astype(np.float32)
    out = np.frombuffer(raw, dtype="<f4", count=rows * d, offset=pos + size).reshape(rows, d).astype(np.float32)
    vocab = Vocabulary(
        entries={t: i for i, (t, _) in enumerate(header["vocab"])},
        min_count=header["min_count"],
        mode=header["mode"],
        bucket_count=header["bucket_count"],
        counts={t: c for t, c in header["vocab"]},
    )
    return EmbeddingModel(
        vocab, inp, out, header["window"], header["nmin"], header["nmax"], header["neg_samples"], header["lr"]
    )
