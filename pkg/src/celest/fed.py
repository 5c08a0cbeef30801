"""Cross-silo Federated Averaging over simulated clients.

Each round every non-removed client trains the current global model on its
labeled data for that window, the server optionally clips the updates,
averages them weighted by sample count and records everything in a
:class:`RoundLedger` so the trust protocol in :mod:`celest.threat` can
recompute leave-one-out aggregates later.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ._rng import derive_rng
from .errors import AggregationError, ConfigError, ContractError
from .nn import ModelWeights, TrainConfig, flatten, loss, train_local, unflatten

log = logging.getLogger(__name__)

UNLABELED = -1
ROLES = ("benign", "helper", "poisoner")


@dataclass
class LabeledSet:
    """Feature rows with labels 1 (malicious), 0 (benign) or -1 (unlabeled)."""

    X: np.ndarray
    y: np.ndarray
    record_ids: list[str]
    families: list[str | None]

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int8).reshape(-1)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ContractError("X must be 2-D with one row per label")
        if len(self.record_ids) != len(self.y) or len(self.families) != len(self.y):
            raise ContractError("record_ids/families must match the number of rows")
        if np.any((self.y < -1) | (self.y > 1)):
            raise ContractError("labels must be -1, 0 or 1")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @classmethod
    def empty(cls, dim: int) -> "LabeledSet":
        return cls(np.zeros((0, dim), dtype=np.float32), np.zeros(0, dtype=np.int8), [], [])

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledSet(
            self.X[idx], self.y[idx], [self.record_ids[i] for i in idx], [self.families[i] for i in idx]
        )

    def labeled(self) -> "LabeledSet":
        return self.subset(np.flatnonzero(self.y >= 0))

    @staticmethod
    def concat(sets: Sequence["LabeledSet"]) -> "LabeledSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            raise ContractError("nothing to concatenate")
        return LabeledSet(
            np.concatenate([s.X for s in sets]),
            np.concatenate([s.y for s in sets]),
            [r for s in sets for r in s.record_ids],
            [f for s in sets for f in s.families],
        )


@dataclass
class ClientState:
    client_id: str
    windows: list[LabeledSet]
    trust: LabeledSet | None = None
    trust_legit: bool = True
    role: str = "benign"
    attack: object | None = None  # threat.AttackConfig
    augmented: LabeledSet | None = None
    investigated: set[str] = field(default_factory=set)
    min_loss: float | None = None
    t_best: int | None = None
    ensemble: object | None = None  # anomaly.WindowEnsemble

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ConfigError(f"unknown client role {self.role!r}")

    def window(self, t: int) -> LabeledSet:
        if not 1 <= t <= len(self.windows):
            raise ContractError(f"client {self.client_id} has no window {t}")
        return self.windows[t - 1]

    def training_set(self, t: int) -> LabeledSet:
        """Labeled records of window ``t`` plus everything added by active learning."""
        parts = [self.window(t).labeled()]
        if self.augmented is not None and len(self.augmented):
            parts.append(self.augmented)
        return LabeledSet.concat(parts)


@dataclass
class ClientUpdate:
    client_id: str
    params: np.ndarray
    n: int
    noop: bool = False


def aggregate(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-weighted mean of parameter vectors.

    Updates are put in a canonical order and identical vectors are merged
    before summing, so the result is bit-identical under any permutation of
    the input and under splitting one client into several with the same
    parameters.
    """
    if not updates:
        raise AggregationError("no updates to aggregate")
    length = len(updates[0][0])
    merged: dict[bytes, list] = {}
    for params, n in updates:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (length,):
            raise AggregationError("update vectors differ in length")
        if n < 0:
            raise AggregationError("sample counts must be non-negative")
        key = params.tobytes()
        if key in merged:
            merged[key][1] += int(n)
        else:
            merged[key] = [params, int(n)]
    total = sum(n for _, n in merged.values())
    if total <= 0:
        raise AggregationError("total sample count is zero")
    out = np.zeros(length)
    for key in sorted(merged, key=lambda k: (merged[k][1], k)):
        params, n = merged[key]
        if n:
            out += (n / total) * params
    return out


@dataclass
class RoundLedger:
    """Server history: global model per round plus the last ``lookback`` rounds of updates."""

    lookback: int = 1
    initial: np.ndarray | None = None
    global_models: dict[int, np.ndarray] = field(default_factory=dict)
    last_updates: dict[str, tuple[np.ndarray, int]] = field(default_factory=dict)
    removed_clients: set[str] = field(default_factory=set)
    history: deque = field(default_factory=deque)
    cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.lookback < 1:
            raise ConfigError("lookback must be >= 1")
        self.history = deque(self.history, maxlen=self.lookback)

    def record(self, t: int, updates: dict[str, tuple[np.ndarray, int]], global_params: np.ndarray) -> None:
        if self.global_models and t <= max(self.global_models):
            raise ContractError(f"round {t} is not after the last recorded round")
        self.global_models[t] = global_params
        self.last_updates = dict(updates)
        self.history.append((t, dict(updates)))
        self.cache.clear()

    @property
    def last_round(self) -> int:
        if not self.global_models:
            raise ContractError("ledger is empty")
        return max(self.global_models)

    def model_at(self, t: int) -> np.ndarray | None:
        if t == 0:
            return self.initial
        return self.global_models.get(t)


class Server:
    """Holds the global model, the ledger and the incident log."""

    def __init__(self, initial: ModelWeights, lookback: int = 1):
        self.input_dim = initial.input_dim
        self.hidden = initial.hidden
        self.global_params = flatten(initial)
        self.ledger = RoundLedger(lookback=lookback, initial=self.global_params.copy())
        self.incidents: list = []

    def weights(self, params: np.ndarray | None = None) -> ModelWeights:
        return unflatten(self.global_params if params is None else params, self.input_dim, self.hidden)

    def loss(self, params: np.ndarray, data: LabeledSet) -> float:
        lab = data.labeled()
        return loss(self.weights(params), lab.X, lab.y)


def client_update(
    client: ClientState, global_params: np.ndarray, t: int, config: TrainConfig, input_dim: int, seed: int = 0
) -> ClientUpdate:
    """Train the global model locally on window ``t`` and return the new parameters.

    Poisoning behaviour (label flipping, boosting) is applied here, inside
    the client.  An empty labeled set yields a no-op update with ``n = 0``.
    """
    from .threat import boost_update, poison_labels

    data = client.training_set(t)
    attack = client.attack
    attacking = attack is not None and attack.active(t)
    if attacking:
        data = poison_labels(data, attack.target_pattern)
        if attack.local_epochs is not None:
            config = dataclasses.replace(config, local_epochs=attack.local_epochs)
    if len(data) == 0:
        return ClientUpdate(client.client_id, np.array(global_params, copy=True), 0, noop=True)
    w = unflatten(global_params, input_dim, config.hidden)
    rng = derive_rng(seed, "client-update", client.client_id, t)
    w = train_local(w, data.X, data.y, config, rng)
    params = flatten(w)
    if attacking and attack.kind == "weight_boost":
        params = boost_update(global_params, params, attack.boost_factor)
    return ClientUpdate(client.client_id, params, len(data))


@dataclass
class RoundResult:
    t: int
    global_params: np.ndarray
    updates: list[ClientUpdate]
    reports: list
    investigations: list


def run_round(
    server: Server,
    clients: Sequence[ClientState],
    t: int,
    config: TrainConfig,
    defense=None,
    seed: int = 0,
) -> RoundResult:
    """One federated round: local training, defenses, aggregation, trust checks."""
    from .threat import DefensePolicy, client_trust_check, clip_update, server_investigate_multiround

    defense = defense or DefensePolicy()
    active = [c for c in clients if c.client_id not in server.ledger.removed_clients]
    if not active:
        raise AggregationError("no active clients left")
    g = server.global_params
    updates = [client_update(c, g, t, config, server.input_dim, seed) for c in active]
    if defense.clipping_bound is not None:
        for u in updates:
            u.params = clip_update(g, u.params, defense.clipping_bound)
    by_client = {u.client_id: (u.params, u.n) for u in updates}
    new_global = aggregate(list(by_client.values()))
    server.ledger.record(t, by_client, new_global)
    server.global_params = new_global

    reports, investigations = [], []
    if defense.dtrust_enabled:
        for c in active:
            if c.role == "poisoner" or c.trust is None or len(c.trust) == 0:
                continue
            rep = client_trust_check(c, server.global_params, t, server.loss, defense.client_threshold)
            if rep is not None:
                reports.append(rep)
        for rep in reports:
            inv = server_investigate_multiround(
                rep,
                server.ledger,
                server.loss,
                defense.server_threshold,
                defense.client_threshold,
                defense.lookback,
            )
            investigations.append(inv)
            server.incidents.append(inv)
            if inv.flagged:
                server.global_params = server.ledger.global_models[t]
                log.info("round %d: flagged %s", t, ", ".join(inv.flagged))
                break
    return RoundResult(t, server.global_params, updates, reports, investigations)


def run_training(
    server: Server,
    clients: Sequence[ClientState],
    rounds: int,
    config: TrainConfig,
    defense=None,
    seed: int = 0,
    evaluate: Callable[[int, np.ndarray], Iterable[tuple]] | None = None,
    after_round: Callable[[ClientState, ModelWeights, int], None] | None = None,
) -> list[tuple]:
    """Run rounds 1..``rounds``; returns the rows produced by ``evaluate``.

    ``after_round`` runs per active client once ``G_t`` is final, before the
    next round's updates (the active-learning hook).
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    rows: list[tuple] = []
    for t in range(1, rounds + 1):
        result = run_round(server, clients, t, config, defense, seed)
        if evaluate is not None:
            rows.extend(evaluate(t, result.global_params))
        if after_round is not None:
            weights = server.weights()
            for c in clients:
                if c.client_id not in server.ledger.removed_clients and t < len(c.windows) + 1:
                    after_round(c, weights, t)
    return rows


def train_centralized(
    sets: Sequence[LabeledSet], rounds: int, config: TrainConfig, initial: ModelWeights, seed: int = 0
) -> ModelWeights:
    """Single-party baseline on the pooled data of every round's sets."""
    w = initial.copy()
    for t in range(1, rounds + 1):
        data = sets[t - 1].labeled()
        if len(data):
            w = train_local(w, data.X, data.y, config, derive_rng(seed, "central", t))
    return w
