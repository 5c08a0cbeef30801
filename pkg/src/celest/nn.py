"""One-hidden-layer feed-forward binary classifier trained with plain SGD."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._rng import derive_rng
from .errors import ConfigError, ContractError

EPS = 1e-7
CHECKPOINT_MAGIC = b"CELNN01\n"


@dataclass
class TrainConfig:
    hidden: int = 128
    dropout_rate: float = 0.1
    lr: float = 0.01
    batch_size: int = 64
    local_epochs: int = 1
    seed: int = 0
    balance: bool = True

    def __post_init__(self) -> None:
        if self.hidden < 1:
            raise ConfigError("hidden must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be >= 1")


@dataclass
class ModelWeights:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.asarray(self.W2, dtype=np.float64).reshape(-1, 1)
        self.b2 = float(self.b2)
        if self.W1.ndim != 2:
            raise ContractError("W1 must be a matrix")
        h = self.W1.shape[1]
        if self.b1.shape != (h,) or self.W2.shape != (h, 1):
            raise ContractError(f"inconsistent dims: W1 {self.W1.shape}, b1 {self.b1.shape}, W2 {self.W2.shape}")

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_params(self) -> int:
        return param_count(self.input_dim, self.hidden)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.W1.copy(), self.b1.copy(), self.W2.copy(), self.b2)

    def is_finite(self) -> bool:
        return bool(np.isfinite(flatten(self)).all())


def param_count(input_dim: int, hidden: int) -> int:
    return input_dim * hidden + hidden + hidden + 1


def init_weights(input_dim: int, config: TrainConfig) -> ModelWeights:
    """Glorot-uniform weights, zero biases, seeded from ``config.seed``."""
    if input_dim < 1:
        raise ConfigError("input_dim must be >= 1")
    rng = derive_rng(config.seed, "nn-init")
    h = config.hidden
    a1 = np.sqrt(6.0 / (input_dim + h))
    a2 = np.sqrt(6.0 / (h + 1))
    W1 = rng.uniform(-a1, a1, size=(input_dim, h))
    W2 = rng.uniform(-a2, a2, size=(h, 1))
    return ModelWeights(W1, np.zeros(h), W2, 0.0)


def flatten(w: ModelWeights) -> np.ndarray:
    """Parameter vector in the order W1 (row-major), b1, W2, b2."""
    return np.concatenate([w.W1.ravel(), w.b1, w.W2.ravel(), [w.b2]])


def unflatten(vec: np.ndarray, input_dim: int, hidden: int) -> ModelWeights:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (param_count(input_dim, hidden),):
        raise ContractError(f"expected {param_count(input_dim, hidden)} params, got {vec.shape}")
    a = input_dim * hidden
    W1 = vec[:a].reshape(input_dim, hidden).copy()
    b1 = vec[a : a + hidden].copy()
    W2 = vec[a + hidden : a + 2 * hidden].reshape(hidden, 1).copy()
    return ModelWeights(W1, b1, W2, float(vec[-1]))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(w: ModelWeights, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != w.input_dim:
        raise ContractError(f"input has {X.shape[-1]} features, model expects {w.input_dim}")
    return X, single


def predict(w: ModelWeights, X) -> np.ndarray | float:
    """Malicious score(s) in [0, 1]; a 1-D input returns a float."""
    X, single = _as_batch(w, X)
    hidden = np.maximum(X @ w.W1 + w.b1, 0.0)
    scores = _sigmoid(hidden @ w.W2[:, 0] + w.b2)
    return float(scores[0]) if single else scores


def loss(w: ModelWeights, X, y) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    X, _ = _as_batch(w, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        raise ContractError("loss of an empty dataset is undefined")
    if len(y) != X.shape[0]:
        raise ContractError("X and y lengths differ")
    return bce(predict(w, X), y)


def bce(scores, y) -> float:
    """Mean binary cross-entropy of precomputed scores, clamped like :func:`loss`."""
    p = np.clip(np.asarray(scores, dtype=np.float64), EPS, 1.0 - EPS)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def gradients(w: ModelWeights, X, y, mask: np.ndarray | None = None) -> tuple[float, ModelWeights]:
    """Mean BCE loss and its gradient, optionally with a hidden-unit mask.

    ``mask`` is the (already scaled) inverted-dropout multiplier of shape
    ``(batch, hidden)``.  The gradient is that of the unclamped loss, which
    equals the clamped loss wherever the clamp is inactive.
    """
    X, _ = _as_batch(w, X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n = len(y)
    pre = X @ w.W1 + w.b1
    act = np.maximum(pre, 0.0)
    if mask is not None:
        act = act * mask
    p = _sigmoid(act @ w.W2[:, 0] + w.b2)
    pc = np.clip(p, EPS, 1.0 - EPS)
    value = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    dz = (p - y) / n
    gW2 = act.T @ dz
    gb2 = float(dz.sum())
    dact = np.outer(dz, w.W2[:, 0])
    if mask is not None:
        dact = dact * mask
    dpre = dact * (pre > 0)
    gW1 = X.T @ dpre
    gb1 = dpre.sum(axis=0)
    return value, ModelWeights(gW1, gb1, gW2, gb2)


def sgd_update(w: ModelWeights, X, y, config: TrainConfig, rng: np.random.Generator | None = None) -> ModelWeights:
    """One SGD step on a batch with inverted dropout on the hidden layer."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if np.any((y != 0) & (y != 1)):
        raise ContractError("batch labels must be 0 (benign) or 1 (malicious)")
    mask = None
    if config.dropout_rate > 0:
        if rng is None:
            raise ContractError("dropout needs an rng")
        keep = 1.0 - config.dropout_rate
        mask = (rng.random((len(y), w.hidden)) < keep) / keep
    _, g = gradients(w, X, y, mask)
    lr = config.lr
    return ModelWeights(w.W1 - lr * g.W1, w.b1 - lr * g.b1, w.W2 - lr * g.W2, w.b2 - lr * g.b2)


def _batches(y: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    n = len(y)
    bs = config.batch_size
    pos = np.flatnonzero(y == 1)
    neg = np.flatnonzero(y == 0)
    if not config.balance or len(pos) == 0 or len(neg) == 0:
        order = rng.permutation(n)
        return [order[i : i + bs] for i in range(0, n, bs)]
    # 50/50 batches: each epoch covers the majority class once, the
    # minority class is resampled with replacement
    n_batches = max(1, -(-2 * max(len(pos), len(neg)) // bs))
    half = max(1, bs // 2)
    out = []
    for _ in range(n_batches):
        out.append(np.concatenate([rng.choice(pos, half), rng.choice(neg, bs - half if bs > 1 else 1)]))
    return out


def train_local(w: ModelWeights, X, y, config: TrainConfig, rng: np.random.Generator) -> ModelWeights:
    """``local_epochs`` passes of mini-batch SGD; returns new weights."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) == 0:
        return w.copy()
    for _ in range(config.local_epochs):
        for idx in _batches(y, config, rng):
            w = sgd_update(w, X[idx], y[idx], config, rng)
    return w


def save_checkpoint(path: str | Path, w: ModelWeights, config: TrainConfig | None = None, extra: dict | None = None) -> None:
    """Header (dims, config) followed by float32 parameters in flatten order."""
    header = {"input_dim": w.input_dim, "hidden": w.hidden, "n_params": w.n_params}
    if config is not None:
        header["config"] = asdict(config)
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(flatten(w).astype("<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ContractError(f"{path}: not a model checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[off : off + 8])
    header = json.loads(data[off + 8 : off + 8 + hlen])
    vec = np.frombuffer(data[off + 8 + hlen :], dtype="<f4").astype(np.float64)
    return unflatten(vec, header["input_dim"], header["hidden"]), header
