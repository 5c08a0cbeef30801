"""Active learning: pick suspicious unlabeled records, reveal them, keep the malware.

Half of the per-round budget goes to the records the current global model
scores highest; the other half goes to the most anomalous of the rest,
scored by an Isolation Forest ensemble fitted on the previous windows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._rng import derive_seed
from .anomaly import WindowEnsemble, advance_window, ensemble_score
from .errors import ConfigError
from .fed import UNLABELED, ClientState, LabeledSet
from .logmodel import Label
from .nn import ModelWeights, predict


@dataclass(frozen=True)
class Budget:
    b: int

    def __post_init__(self) -> None:
        if self.b < 0 or self.b % 2:
            raise ConfigError(f"budget must be an even integer >= 0, got {self.b}")


@dataclass(frozen=True)
class OracleAnalyst:
    """Ground truth lookup standing in for a human analyst."""

    truth: Mapping[str, tuple[Label, str | None]]

    def reveal(self, record_id: str) -> tuple[Label, str | None]:
        return self.truth[record_id]


@dataclass(frozen=True)
class Selection:
    record_id: str
    selector: str  # "classifier" or "anomaly"
    row: int


def _top(ids: list[str], scores: np.ndarray, count: int) -> list[int]:
    """Indices of the ``count`` highest scores; ties broken by record id."""
    order = sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))
    return order[:count]


def select_candidates(
    window: LabeledSet,
    weights: ModelWeights,
    ensemble: WindowEnsemble | None,
    b: int,
    investigated: set[str] | frozenset[str] = frozenset(),
) -> tuple[list[Selection], list[Selection]]:
    """Classifier half then anomaly half, disjoint, over uninvestigated unlabeled rows.

    Without an ensemble, or when the anomaly half cannot be filled, the
    classifier ranking supplies the remaining picks.
    """
    Budget(b)
    if b == 0:
        return [], []
    rows = [i for i in np.flatnonzero(window.y == UNLABELED) if window.record_ids[i] not in investigated]
    if not rows:
        return [], []
    ids = [window.record_ids[i] for i in rows]
    X = window.X[rows]
    clf_scores = np.atleast_1d(predict(weights, X))
    clf_order = _top(ids, clf_scores, len(ids))
    half = b // 2
    clf_pick = clf_order[:half]
    taken = set(clf_pick)
    remaining = [j for j in range(len(ids)) if j not in taken]
    anom_pick: list[int] = []
    ens = ensemble_score(ensemble, X[remaining]) if ensemble is not None and remaining else None
    if ens is not None:
        rem_ids = [ids[j] for j in remaining]
        anom_pick = [remaining[j] for j in _top(rem_ids, np.atleast_1d(ens), half)]
    else:
        anom_pick = [j for j in clf_order[half:] if j not in taken][:half]
        return (
            [Selection(ids[j], "classifier", int(rows[j])) for j in clf_pick + anom_pick],
            [],
        )
    return (
        [Selection(ids[j], "classifier", int(rows[j])) for j in clf_pick],
        [Selection(ids[j], "anomaly", int(rows[j])) for j in anom_pick],
    )


def investigate_and_augment(
    client: ClientState, window: LabeledSet, candidates: list[Selection], oracle: OracleAnalyst
) -> tuple[int, list[tuple[str, str, str]]]:
    """Reveal candidates; add the malicious ones to the client's training pool.

    Returns the count of new malicious labels and audit rows
    ``(record_id, selector, revealed label)``.
    """
    audit = []
    new_rows, families = [], []
    for sel in candidates:
        label, family = oracle.reveal(sel.record_id)
        client.investigated.add(sel.record_id)
        audit.append((sel.record_id, sel.selector, label.value))
        if label is Label.MALICIOUS:
            new_rows.append(sel.row)
            families.append(family)
    if new_rows:
        found = window.subset(new_rows)
        found = LabeledSet(found.X, np.ones(len(new_rows), dtype=np.int8), found.record_ids, families)
        client.augmented = found if client.augmented is None else LabeledSet.concat([client.augmented, found])
    return len(new_rows), audit


def active_round_hook(
    client: ClientState,
    weights: ModelWeights,
    t: int,
    budget: int,
    oracle: OracleAnalyst,
    k: int = 3,
    psi: int = 256,
    n_trees: int = 100,
    seed: int = 0,
) -> list[tuple]:
    """Select from window ``t``, reveal, augment, then roll the anomaly ensemble.

    The ensemble used for selection covers windows before ``t``.  Returns
    audit rows ``(round, client, record_id, selector, label)``.
    """
    Budget(budget)
    if budget == 0:
        return []
    if client.ensemble is None:
        client.ensemble = WindowEnsemble(k=k, psi=psi, n_trees=n_trees)
    window = client.window(t)
    clf_half, anom_half = select_candidates(window, weights, client.ensemble, budget, client.investigated)
    _, audit = investigate_and_augment(client, window, clf_half + anom_half, oracle)
    unlabeled = window.X[window.y == UNLABELED]
    client.ensemble = advance_window(client.ensemble, unlabeled, seed=hash_seed(seed, client.client_id, t))
    return [(t, client.client_id, rid, sel, lab) for rid, sel, lab in audit]


def hash_seed(seed: int, client_id: str, t: int) -> int:
    """Stable integer seed for one client's forest at round ``t``."""
    return int(np.random.SeedSequence(derive_seed(seed, "anomaly", client_id, t)).generate_state(1)[0])
