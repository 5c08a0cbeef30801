import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celest.errors import ConfigError, ContractError
from celest.nn import (
    ModelWeights,
    TrainConfig,
    flatten,
    gradients,
    init_weights,
    load_checkpoint,
    loss,
    param_count,
    predict,
    save_checkpoint,
    sgd_update,
    train_local,
    unflatten,
)

from oracles import central_diff, mlp_loss_loops, rel_error


def test_init_weights():
    cfg = TrainConfig(hidden=16, seed=3)
    a, b = init_weights(10, cfg), init_weights(10, cfg)
    assert np.array_equal(flatten(a), flatten(b))
    assert not np.any(a.b1) and a.b2 == 0.0
    assert np.all(np.abs(a.W1) <= math.sqrt(6 / (10 + 16)))
    assert np.all(np.abs(a.W2) <= math.sqrt(6 / (16 + 1)))
    with pytest.raises(ConfigError):
        init_weights(0, cfg)


def test_predict_examples():
    zero = ModelWeights(np.zeros((3, 2)), np.zeros(2), np.zeros((2, 1)), 0.0)
    assert predict(zero, np.ones(3)) == 0.5
    w = ModelWeights([[1.0, -2.0], [0.5, 1.0]], [0.1, 0.2], [[1.5], [-0.5]], -0.3)
    x = np.array([0.4, -1.2])
    h1 = max(0.4 * 1.0 + -1.2 * 0.5 + 0.1, 0.0)
    h2 = max(0.4 * -2.0 + -1.2 * 1.0 + 0.2, 0.0)
    expected = 1 / (1 + math.exp(-(1.5 * h1 - 0.5 * h2 - 0.3)))
    assert abs(predict(w, x) - expected) < 1e-9
    w_up = ModelWeights(w.W1, w.b1, w.W2, 0.7)
    assert predict(w_up, x) > predict(w, x)
    with pytest.raises(ContractError):
        predict(w, np.ones(3))


def test_loss_examples():
    zero = ModelWeights(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)), 0.0)
    assert abs(loss(zero, np.ones((4, 2)), [0, 1, 0, 1]) - math.log(2)) < 1e-12
    big = ModelWeights(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)), 50.0)
    assert loss(big, np.ones((3, 2)), [1, 1, 1]) <= 1e-6
    assert math.isfinite(loss(big, np.ones((1, 2)), [0]))
    w = ModelWeights([[1.0], [0.0]], [0.0], [[1.0]], 0.0)
    X = np.array([[1.0, 0.0], [2.0, 0.0]])
    p1, p2 = 1 / (1 + math.exp(-1)), 1 / (1 + math.exp(-2))
    assert abs(loss(w, X, [1, 0]) - (-(math.log(p1) + math.log(1 - p2)) / 2)) < 1e-12
    with pytest.raises(ContractError):
        loss(w, np.zeros((0, 2)), [])


def test_flatten_round_trip():
    w = init_weights(7, TrainConfig(hidden=5, seed=1))
    v = flatten(w)
    assert len(v) == param_count(7, 5) == 7 * 5 + 5 + 5 + 1
    assert np.array_equal(flatten(unflatten(v, 7, 5)), v)
    with pytest.raises(ContractError):
        unflatten(v[:-1], 7, 5)


@given(st.integers(0, 10_000), st.booleans())
def test_gradient_matches_finite_differences(seed, with_mask):
    rng = np.random.default_rng(seed)
    d, h, n = int(rng.integers(1, 4)), int(rng.integers(1, 4)), 4
    w = ModelWeights(rng.normal(size=(d, h)), rng.normal(size=h), rng.normal(size=(h, 1)), rng.normal())
    X = rng.normal(size=(n, d))
    y = rng.integers(0, 2, size=n).astype(float)
    mask = (rng.random((n, h)) < 0.7) / 0.7 if with_mask else None
    _, g = gradients(w, X, y, mask)
    for name in ("W1", "b1", "W2"):
        param = getattr(w, name)
        num = central_diff(lambda: mlp_loss_loops(w.W1, w.b1, w.W2, w.b2, X, y, mask), param)
        assert rel_error(getattr(g, name), num, floor=1e-6) < 1e-4
    b2 = np.array([w.b2])

    def f():
        return mlp_loss_loops(w.W1, w.b1, w.W2, b2[0], X, y, mask)

    assert rel_error(np.array([g.b2]), central_diff(f, b2), floor=1e-6) < 1e-4


def test_saturated_update_is_tiny():
    w = ModelWeights(np.zeros((2, 2)), np.zeros(2), np.zeros((2, 1)), 40.0)
    cfg = TrainConfig(hidden=2, dropout_rate=0.0, lr=0.1)
    new = sgd_update(w, np.ones((3, 2)), [1, 1, 1], cfg)
    assert np.linalg.norm(flatten(new) - flatten(w)) < 1e-6


def test_duplicated_batch_same_update():
    rng = np.random.default_rng(0)
    w = init_weights(4, TrainConfig(hidden=3))
    X = rng.normal(size=(5, 4))
    y = np.array([0, 1, 1, 0, 1])
    cfg = TrainConfig(hidden=3, dropout_rate=0.0)
    a = sgd_update(w, X, y, cfg)
    b = sgd_update(w, np.vstack([X, X]), np.concatenate([y, y]), cfg)
    np.testing.assert_allclose(flatten(a), flatten(b), rtol=0, atol=1e-14)


def test_sgd_update_contracts():
    w = init_weights(2, TrainConfig(hidden=2))
    with pytest.raises(ContractError):
        sgd_update(w, np.ones((1, 2)), [2], TrainConfig(hidden=2, dropout_rate=0.0))
    with pytest.raises(ContractError):
        sgd_update(w, np.ones((1, 2)), [1], TrainConfig(hidden=2, dropout_rate=0.5))


def test_training_deterministic_and_learns():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(200, 5))
    y = (X[:, 0] > 0.5).astype(int)
    cfg = TrainConfig(hidden=8, lr=0.1, local_epochs=5, batch_size=16)
    w0 = init_weights(5, cfg)
    a = train_local(w0, X, y, cfg, np.random.default_rng(9))
    b = train_local(w0, X, y, cfg, np.random.default_rng(9))
    assert np.array_equal(flatten(a), flatten(b))
    assert loss(a, X, y) < loss(w0, X, y)
    assert a.is_finite()


def test_lr_zero_keeps_weights():
    cfg = TrainConfig(hidden=4, lr=0.0)
    w0 = init_weights(3, cfg)
    w = train_local(w0, np.ones((10, 3)), np.arange(10) % 2, cfg, np.random.default_rng(0))
    assert np.array_equal(flatten(w), flatten(w0))


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(hidden=4)
    w = init_weights(6, cfg)
    save_checkpoint(tmp_path / "m.ckpt", w, cfg, {"round": 3})
    back, header = load_checkpoint(tmp_path / "m.ckpt")
    np.testing.assert_allclose(flatten(back), flatten(w).astype(np.float32), rtol=0, atol=0)
    assert header["config"]["hidden"] == 4 and header["extra"] == {"round": 3}
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "bad")
