import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celest.active import (
    Budget,
    OracleAnalyst,
    active_round_hook,
    investigate_and_augment,
    select_candidates,
)
from celest.anomaly import WindowEnsemble, advance_window
from celest.errors import ConfigError
from celest.fed import ClientState, LabeledSet, Server, run_round
from celest.logmodel import Label
from celest.nn import ModelWeights, TrainConfig, init_weights


def linear_model(dim, direction):
    """One ReLU unit on ``x @ direction``: the score is monotone in that projection."""
    return ModelWeights(np.asarray(direction, dtype=float).reshape(dim, 1), np.zeros(1), np.ones((1, 1)), 0.0)


def unlabeled_window(values, labeled=()):
    X = np.asarray(values, dtype=np.float32).reshape(-1, 1)
    y = np.full(len(X), -1, dtype=np.int8)
    for i in labeled:
        y[i] = 0
    return LabeledSet(X, y, [f"r{i}" for i in range(len(X))], [None] * len(X))


def test_budget_validation():
    Budget(0)
    Budget(200)
    for b in (-2, 3, 51):
        with pytest.raises(ConfigError):
            Budget(b)


def test_zero_budget_selects_nothing():
    win = unlabeled_window([1, 2, 3])
    assert select_candidates(win, linear_model(1, [1]), None, 0) == ([], [])


def test_hand_example_b4():
    # relu(x) ranks 5, 4 highest; the forest trained around 0 finds -9 most anomalous.
    win = unlabeled_window([0.1, 5, -9, 4, 0.2, 0.0, 3])
    ens = advance_window(WindowEnsemble(k=1, psi=32, n_trees=50), np.zeros((64, 1)) + np.linspace(-1, 1, 64)[:, None], 0)
    clf, anom = select_candidates(win, linear_model(1, [1]), ens, 4)
    assert [s.record_id for s in clf] == ["r1", "r3"]
    assert all(s.selector == "classifier" for s in clf)
    assert anom[0].record_id == "r2" and len(anom) == 2
    assert {s.record_id for s in clf}.isdisjoint(s.record_id for s in anom)


def test_without_ensemble_classifier_fills_budget():
    win = unlabeled_window([1, 5, 3, 2])
    clf, anom = select_candidates(win, linear_model(1, [1]), None, 4)
    assert [s.record_id for s in clf] == ["r1", "r2", "r3", "r0"] and anom == []


@given(
    st.lists(st.floats(-5, 5, allow_nan=False, width=32), min_size=0, max_size=30),
    st.integers(0, 12).map(lambda k: 2 * k),
    st.sets(st.integers(0, 29), max_size=10),
    st.sets(st.integers(0, 29), max_size=10),
)
def test_selection_invariants(values, b, labeled, investigated):
    win = unlabeled_window(values, [i for i in labeled if i < len(values)])
    done = {f"r{i}" for i in investigated}
    ens = advance_window(WindowEnsemble(k=1, psi=8, n_trees=5), np.arange(16, dtype=float).reshape(-1, 1), 1)
    clf, anom = select_candidates(win, linear_model(1, [1]), ens, b, done)
    picked = [s.record_id for s in clf + anom]
    assert len(picked) == len(set(picked)) <= b
    assert len(clf) <= b // 2 and len(anom) <= b // 2
    eligible = {f"r{i}" for i in range(len(values)) if i not in labeled} - done
    assert set(picked) <= eligible
    assert len(picked) == min(b, len(eligible))


def test_augment_keeps_only_malicious():
    win = unlabeled_window(range(10))
    truth = {f"r{i}": ((Label.MALICIOUS, "mirai") if i in (2, 5, 7) else (Label.BENIGN, None)) for i in range(10)}
    client = ClientState("c", [win])
    clf, anom = select_candidates(win, linear_model(1, [1]), None, 10)
    found, audit = investigate_and_augment(client, win, clf + anom, OracleAnalyst(truth))
    assert found == 3 and len(audit) == 10
    assert client.augmented.y.tolist() == [1, 1, 1]
    assert sorted(client.augmented.record_ids) == ["r2", "r5", "r7"]
    assert client.augmented.families == ["mirai"] * 3
    assert len(client.investigated) == 10


def _client(rng, T=6, n=40):
    wins = []
    for t in range(T):
        X = rng.normal(size=(n, 3)).astype(np.float32)
        y = np.where(rng.random(n) < 0.5, -1, 0).astype(np.int8)
        y[:3] = 1
        wins.append(LabeledSet(X, y, [f"w{t}-{i}" for i in range(n)], [None] * n))
    truth = {}
    for w in wins:
        for rid, x in zip(w.record_ids, w.X):
            truth[rid] = (Label.MALICIOUS, "x") if x[0] > 1 else (Label.BENIGN, None)
    return ClientState("c0", wins), OracleAnalyst(truth)


def test_hook_never_reselects_and_respects_budget():
    rng = np.random.default_rng(0)
    client, oracle = _client(rng)
    w = init_weights(3, TrainConfig(hidden=4))
    seen, total = set(), 0
    for t in range(1, 7):
        rows = active_round_hook(client, w, t, 6, oracle, k=2, psi=16, n_trees=10)
        ids = [r[2] for r in rows]
        assert seen.isdisjoint(ids)
        seen.update(ids)
        total += len(rows)
        assert total <= 6 * t
        assert len(client.ensemble) == min(t, 2)
    # labels only ever grow
    assert client.augmented is None or set(client.augmented.y.tolist()) <= {1}


def test_budget_zero_matches_plain_training():
    cfg = TrainConfig(hidden=4)

    def run(hook):
        client, oracle = _client(np.random.default_rng(3))
        server = Server(init_weights(3, cfg))
        for t in range(1, 5):
            run_round(server, [client], t, cfg, seed=1)
            if hook:
                assert active_round_hook(client, server.weights(), t, 0, oracle) == []
        return server.global_params

    assert np.array_equal(run(False), run(True))
