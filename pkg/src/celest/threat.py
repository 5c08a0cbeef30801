"""Poisoning behaviours, norm clipping and the DTrust detection protocol.

DTrust in short: every benign client keeps a small verified labeled set.
When the global model's loss on it rises more than ``client_threshold``
above the best loss seen so far, the client reports to the server, which
recomputes the last aggregate without each client in turn.  A client whose
exclusion lowers the trust loss by more than ``server_threshold`` (relative)
is flagged, removed and the global model is rebuilt without it.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, InvestigationError
from .fed import ClientState, LabeledSet, RoundLedger, aggregate

log = logging.getLogger(__name__)

ATTACK_KINDS = ("label_flip", "weight_boost")
MIN_LOSS = 1e-12

LossFn = Callable[[np.ndarray, LabeledSet], float]


@dataclass
class AttackConfig:
    kind: str
    target_pattern: str
    boost_factor: float = 1.0
    start_round: int = 1
    m: int = 1
    local_epochs: int | None = None  # attacker's own training effort; None: as configured

    def __post_init__(self) -> None:
        if self.local_epochs is not None and self.local_epochs < 1:
            raise ConfigError("attacker local_epochs must be >= 1")
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.kind == "weight_boost" and not self.boost_factor > 1:
            raise ConfigError("weight_boost needs boost_factor > 1")
        if self.start_round < 1 or self.m < 1:
            raise ConfigError("start_round and m must be >= 1")

    @classmethod
    def boosting(cls, target_pattern: str, n_clients: int, m: int, start_round: int = 1) -> "AttackConfig":
        """Weight boosting with the default factor (clients / poisoners)."""
        return cls("weight_boost", target_pattern, n_clients / m, start_round, m)

    def active(self, t: int) -> bool:
        return t >= self.start_round


@dataclass
class DefensePolicy:
    clipping_bound: float | None = None
    dtrust_enabled: bool = False
    client_threshold: float = 0.1
    server_threshold: float = 0.5
    lookback: int = 1

    def __post_init__(self) -> None:
        if self.client_threshold <= 0 or self.server_threshold <= 0:
            raise ConfigError("thresholds must be > 0")
        if self.clipping_bound is not None and self.clipping_bound <= 0:
            raise ConfigError("clipping bound must be > 0")
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")


@dataclass
class TrustReport:
    client_id: str
    round: int
    t_best: int
    trust_dataset: LabeledSet
    current_loss: float
    min_loss: float
    legitimate: bool = True

    @property
    def impact(self) -> float:
        return (self.current_loss - self.min_loss) / self.min_loss


@dataclass
class Investigation:
    round: int
    triggering_client: str
    impacts: dict[str, float] = field(default_factory=dict)
    flagged: list[str] = field(default_factory=list)
    reverted_round: int | None = None
    dismissed: str | None = None

    def to_json(self) -> dict:
        return {
            "round": self.round,
            "triggering_client": self.triggering_client,
            "impacts": {k: self.impacts[k] for k in sorted(self.impacts)},
            "flagged": list(self.flagged),
            "reverted_round": self.reverted_round,
            "dismissed": self.dismissed,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def poison_labels(data: LabeledSet, target_pattern: str) -> LabeledSet:
    """Relabel every training sample of ``target_pattern`` as benign."""
    hit = np.array([f == target_pattern for f in data.families], dtype=bool)
    if not hit.any():
        return data
    y = data.y.copy()
    y[hit & (y == 1)] = 0
    return LabeledSet(data.X, y, list(data.record_ids), list(data.families))


def _check_lengths(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"parameter vectors differ in shape: {a.shape} vs {b.shape}")


def boost_update(global_params, local_params, boost_factor: float) -> np.ndarray:
    g = np.asarray(global_params, dtype=np.float64)
    w = np.asarray(local_params, dtype=np.float64)
    _check_lengths(g, w)
    if boost_factor == 1:
        return w.copy()
    return g + boost_factor * (w - g)


def clip_update(global_params, update, bound: float) -> np.ndarray:
    """Rescale ``update - global`` to L2 norm at most ``bound``."""
    if not bound > 0:
        raise ConfigError("clipping bound must be > 0")
    g = np.asarray(global_params, dtype=np.float64)
    w = np.asarray(update, dtype=np.float64)
    _check_lengths(g, w)
    delta = w - g
    norm = float(np.linalg.norm(delta))
    if norm <= bound:
        return w.copy()
    return g + delta * (bound / norm)


def client_trust_check(
    client: ClientState, global_params: np.ndarray, t: int, loss_fn: LossFn, threshold: float
) -> TrustReport | None:
    """Compare the trust-set loss of ``G_t`` with the best loss seen so far.

    Updates the client's running minimum when no report is raised.
    """
    if client.trust is None or len(client.trust) == 0:
        return None
    current = loss_fn(global_params, client.trust)
    if client.min_loss is None:
        client.min_loss, client.t_best = max(current, MIN_LOSS), t
        return None
    impact = (current - client.min_loss) / client.min_loss
    if impact > threshold:
        return TrustReport(
            client.client_id, t, client.t_best, client.trust, current, client.min_loss, client.trust_legit
        )
    if current < client.min_loss:
        client.min_loss, client.t_best = max(current, MIN_LOSS), t
    return None


def _agg(updates: dict, exclude: set[str]) -> np.ndarray | None:
    kept = [v for k, v in updates.items() if k not in exclude]
    if not kept or sum(n for _, n in kept) <= 0:
        return None
    return aggregate(kept)


def _excluding(ledger: RoundLedger, exclude: set[str], k: int) -> np.ndarray | None:
    """Latest aggregate with ``exclude`` removed from the last ``k`` rounds.

    The effect of the excluded clients on earlier rounds is subtracted as
    the difference between the full and the reduced aggregate of each round.
    """
    key = (k, frozenset(exclude))
    if key in ledger.cache:
        return ledger.cache[key]
    rounds = list(ledger.history)[-k:]
    t_last, last = rounds[-1]
    out = _agg(last, exclude)
    if out is None:
        return None
    for _, updates in rounds[:-1]:
        full = _agg(updates, set())
        reduced = _agg(updates, exclude)
        if full is not None and reduced is not None:
            out = out - (full - reduced)
    ledger.cache[key] = out
    return out


def server_investigate_multiround(
    report: TrustReport,
    ledger: RoundLedger,
    loss_fn: LossFn,
    server_threshold: float = 0.5,
    client_threshold: float = 0.1,
    k: int = 1,
) -> Investigation:
    """Leave-one-out investigation over each client's last ``k`` updates.

    Mutates the ledger when clients are flagged: they join
    ``removed_clients`` and the latest global model is replaced by the
    aggregate without them.
    """
    if not ledger.history:
        raise InvestigationError("ledger holds no rounds")
    t = ledger.last_round
    inv = Investigation(t, report.client_id)
    if not report.legitimate:
        inv.dismissed = "illegitimate trust dataset"
        return inv
    best = ledger.model_at(report.t_best)
    current = ledger.global_models.get(t)
    if best is None or current is None:
        raise InvestigationError(f"ledger lacks the global model of round {report.t_best} or {t}")
    trust = report.trust_dataset
    l_best = max(loss_fn(best, trust), MIN_LOSS)
    l_cur = loss_fn(current, trust)
    if (l_cur - l_best) / l_best <= client_threshold:
        inv.dismissed = "best model not significantly better"
        return inv
    k = min(k, len(ledger.history))
    for client_id in sorted(ledger.last_updates):
        reduced = _excluding(ledger, {client_id}, k)
        if reduced is None:
            continue
        l_red = max(loss_fn(reduced, trust), MIN_LOSS)
        impact = (l_cur - l_red) / l_red
        inv.impacts[client_id] = impact
        if impact > server_threshold:
            inv.flagged.append(client_id)
    if inv.flagged:
        flagged = set(inv.flagged)
        reverted = _excluding(ledger, flagged, k)
        if reverted is None:
            raise InvestigationError("every client of the last round was flagged")
        ledger.removed_clients |= flagged
        ledger.global_models[t] = reverted
        for _, updates in ledger.history:
            for c in flagged:
                updates.pop(c, None)
        ledger.last_updates = dict(ledger.history[-1][1])
        ledger.cache.clear()
        inv.reverted_round = t
    return inv


def server_investigate(
    report: TrustReport,
    ledger: RoundLedger,
    loss_fn: LossFn,
    server_threshold: float = 0.5,
    client_threshold: float = 0.1,
) -> Investigation:
    """Single-round investigation (leave-one-out over the last round only)."""
    return server_investigate_multiround(report, ledger, loss_fn, server_threshold, client_threshold, k=1)
