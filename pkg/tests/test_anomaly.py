import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from celest.anomaly import (
    WindowEnsemble,
    advance_window,
    c_factor,
    ensemble_score,
    fit_forest,
    score,
)

from oracles import c_factor_ref, tree_path_length_ref


def nested(tree, node=0):
    """Flat IsoTree arrays -> nested dict for the recursive reference."""
    if tree.left[node] < 0:
        return {"leaf": int(tree.size[node])}
    return {
        "dim": int(tree.feature[node]),
        "value": float(tree.threshold[node]),
        "left": nested(tree, int(tree.left[node])),
        "right": nested(tree, int(tree.right[node])),
    }


def test_c_factor_values():
    assert c_factor(2) == 1.0
    assert c_factor(1) == 0.0
    for n in (3, 8, 256, 1000):
        assert abs(c_factor(n) - c_factor_ref(n)) < 1e-9


def test_two_identical_points_make_a_leaf():
    f = fit_forest(np.ones((2, 3)), psi=2, n_trees=1, seed=0)
    (tree,) = f.trees
    assert tree.left[0] == -1 and tree.size[0] == 2
    assert f.expected_path_length(np.ones((1, 3)))[0] == 1.0
    assert score(f, np.ones(3)) == 0.5  # E[h] = c(psi)


def test_degenerate_forest_scores_half():
    f = fit_forest(np.ones((1, 2)), seed=0)
    assert f.degenerate and score(f, np.zeros(2)) == 0.5


def test_seed_reproducible():
    X = np.random.default_rng(0).normal(size=(50, 3))
    a, b = fit_forest(X, psi=32, n_trees=10, seed=4), fit_forest(X, psi=32, n_trees=10, seed=4)
    assert np.array_equal(score(a, X), score(b, X))


def test_planted_outlier_scores_higher():
    rng = np.random.default_rng(1)
    X = rng.normal(0, 0.1, size=(300, 2))
    X[0] = [5.0, 5.0]
    f = fit_forest(X, psi=128, n_trees=100, seed=0)
    s = score(f, X)
    assert s[0] > np.median(s[1:])


@given(st.integers(2, 8), st.integers(1, 3), st.integers(0, 1000))
def test_path_lengths_match_recursive_oracle(n, dims, seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(n, dims)).astype(float)
    f = fit_forest(X, psi=n, n_trees=5, seed=seed)
    queries = np.vstack([X, rng.normal(1.5, 2.0, size=(4, dims))])
    ref = np.mean([[tree_path_length_ref(nested(t), q) for q in queries] for t in f.trees], axis=0)
    np.testing.assert_allclose(f.expected_path_length(queries), ref, rtol=0, atol=1e-12)
    bound = f.height_limit + c_factor(n)
    assert np.all(f.expected_path_length(queries) <= bound + 1e-12)


@given(st.integers(0, 500))
def test_scores_strictly_inside_unit_interval(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 3))
    f = fit_forest(X, psi=16, n_trees=5, seed=seed)
    s = score(f, np.vstack([X, 100 * rng.normal(size=(5, 3))]))
    assert np.all((s > 0) & (s < 1))


def test_ensemble_rules():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 2))
    f1 = fit_forest(X, psi=32, n_trees=10, seed=1)
    f2 = fit_forest(X, psi=32, n_trees=10, seed=2)
    assert ensemble_score(WindowEnsemble(k=3), X) is None
    assert np.array_equal(ensemble_score(WindowEnsemble(1, forests=[f1]), X), score(f1, X))
    assert np.allclose(ensemble_score(WindowEnsemble(3, forests=[f1, f1]), X), score(f1, X))
    a = ensemble_score(WindowEnsemble(3, forests=[f1, f2]), X)
    b = ensemble_score(WindowEnsemble(3, forests=[f2, f1]), X)
    assert np.array_equal(a, b)
    assert np.allclose(a, (score(f1, X) + score(f2, X)) / 2)


def test_advance_window_keeps_last_k():
    ens = WindowEnsemble(k=3, psi=8, n_trees=2)
    assert WindowEnsemble().k == 3
    windows = [np.full((10, 1), float(i)) + np.arange(10)[:, None] for i in range(5)]
    for i, w in enumerate(windows):
        ens = advance_window(ens, w, seed=i)
    assert len(ens) == 3
    last = [fit_forest(w, 8, 2, seed=i) for i, w in enumerate(windows)][-3:]
    for got, want in zip(ens.forests, last):
        assert np.array_equal(got.trees[0].threshold, want.trees[0].threshold)
    assert advance_window(ens, np.zeros((0, 1))) is ens
