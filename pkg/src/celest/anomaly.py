"""Isolation Forest scoring and a rolling ensemble over recent windows."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._rng import derive_rng
from .errors import ConfigError

EULER_GAMMA = 0.5772156649015329


def c_factor(n: int | float) -> float:
    """Average unsuccessful-search path length in a binary search tree of n nodes."""
    if n > 2:
        return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n
    if n == 2:
        return 1.0
    return 0.0


def _c_vec(sizes: np.ndarray) -> np.ndarray:
    out = np.zeros(len(sizes))
    big = sizes > 2
    n = sizes[big].astype(np.float64)
    out[big] = 2.0 * (np.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n
    out[sizes == 2] = 1.0
    return out


@dataclass
class IsoTree:
    """Flat array representation; ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    def path_lengths(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                break
            idx = rows[internal]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
        return self.depth[node] + _c_vec(self.size[node])


def _build_tree(X: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsoTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n: int, dep: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(dep)
        return len(size) - 1

    root = new_node(len(X), 0)
    stack = [(root, X, 0)]
    while stack:
        node, data, dep = stack.pop()
        if dep >= height_limit or len(data) <= 1:
            continue
        lo = data.min(axis=0)
        hi = data.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if len(candidates) == 0:
            continue
        q = int(candidates[rng.integers(len(candidates))])
        v = float(rng.uniform(lo[q], hi[q]))
        mask = data[:, q] <= v
        left_data, right_data = data[mask], data[~mask]
        if len(left_data) == 0 or len(right_data) == 0:
            # uniform draw landed on the max; guard for float edge cases
            v = float(lo[q])
            mask = data[:, q] <= v
            left_data, right_data = data[mask], data[~mask]
        feature[node] = q
        threshold[node] = v
        l = new_node(len(left_data), dep + 1)
        r = new_node(len(right_data), dep + 1)
        left[node] = l
        right[node] = r
        stack.append((r, right_data, dep + 1))
        stack.append((l, left_data, dep + 1))
    return IsoTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(size, dtype=np.int64),
        np.asarray(depth, dtype=np.float64),
    )


@dataclass
class IsoForest:
    trees: list[IsoTree]
    psi: int
    n_trees: int
    height_limit: int

    @property
    def degenerate(self) -> bool:
        return not self.trees

    def expected_path_length(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.degenerate:
            return np.full(len(X), c_factor(self.psi))
        return np.mean([t.path_lengths(X) for t in self.trees], axis=0)


def fit_forest(data, psi: int = 256, n_trees: int = 100, seed: int = 0) -> IsoForest:
    """Fit ``n_trees`` isolation trees on subsamples of size ``min(psi, len(data))``.

    Fewer than two points yield a degenerate forest that scores 0.5.
    """
    if psi < 2 or n_trees < 1:
        raise ConfigError("need psi >= 2 and n_trees >= 1")
    X = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if len(data) < 2:
        return IsoForest([], psi, n_trees, 0)
    sample = min(psi, len(X))
    height_limit = math.ceil(math.log2(sample))
    rng = derive_rng(seed, "isoforest")
    trees = []
    for _ in range(n_trees):
        idx = rng.choice(len(X), size=sample, replace=False)
        trees.append(_build_tree(X[idx], height_limit, rng))
    return IsoForest(trees, sample, n_trees, height_limit)


def score(forest: IsoForest, x) -> np.ndarray | float:
    """Anomaly score 2^(-E[h]/c(psi)); a single vector returns a float."""
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if forest.degenerate:
        s = np.full(1 if single else len(X), 0.5)
    else:
        s = np.power(2.0, -forest.expected_path_length(X) / c_factor(forest.psi))
    return float(s[0]) if single else s


@dataclass
class WindowEnsemble:
    k: int = 3
    psi: int = 256
    n_trees: int = 100
    forests: list[IsoForest] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError("ensemble k must be >= 1")

    def __len__(self) -> int:
        return len(self.forests)


def ensemble_score(ensemble: WindowEnsemble, x) -> np.ndarray | float | None:
    """Mean member score, or None when the ensemble is empty."""
    if not ensemble.forests:
        return None
    scores = [np.asarray(score(f, x), dtype=np.float64) for f in ensemble.forests]
    mean = np.mean(scores, axis=0)
    return float(mean) if mean.ndim == 0 else mean


def advance_window(ensemble: WindowEnsemble, new_window_data, seed: int = 0) -> WindowEnsemble:
    """Fit a forest on the new window and keep only the ``k`` most recent."""
    if new_window_data is None or len(new_window_data) == 0:
        return ensemble
    forest = fit_forest(new_window_data, ensemble.psi, ensemble.n_trees, seed)
    forests = (ensemble.forests + [forest])[-ensemble.k :]
    return WindowEnsemble(ensemble.k, ensemble.psi, ensemble.n_trees, forests)
