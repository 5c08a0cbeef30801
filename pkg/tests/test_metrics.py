from itertools import product

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celest.metrics import (
    UndefinedMetricError,
    fpr_at_recall,
    pr_auc,
    pr_curve,
    precision_recall_f1,
)

from oracles import all_labelings, brute_fpr_at_recall, brute_pr_auc


def test_curve_examples():
    curve = pr_curve([0.9, 0.8, 0.7], [1, 0, 1])
    assert curve[0] == (0.0, 1.0)
    assert (0.5, 1.0) in curve and curve[-1] == pytest.approx((1.0, 2 / 3))
    assert [r for r, _ in curve] == sorted(r for r, _ in curve)
    assert pr_auc([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6)
    assert pr_curve([0.5] * 4, [1, 0, 0, 1])[-1] == (1.0, 0.5)
    assert pr_auc([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    with pytest.raises(UndefinedMetricError):
        pr_auc([0.1, 0.2], [0, 0])


def test_fpr_examples():
    assert fpr_at_recall([0.9, 0.8, 0.1], [1, 1, 0], 0.9) == 0.0
    assert fpr_at_recall([0.99, 0.5, 0.4, 0.1], [0, 1, 1, 0], 0.5) == 0.5
    scores = [0.3, 0.9, 0.6, 0.2]
    labels = [1, 1, 0, 0]
    assert fpr_at_recall(scores, labels, 1.0) == 0.5  # threshold at the minimum positive score 0.3
    assert fpr_at_recall([0.2, 0.7], [1, 1], 0.9) == 0.0


def test_precision_recall_f1():
    p, r, f = precision_recall_f1([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0], 0.5)
    assert (p, r) == (0.5, 0.5) and f == pytest.approx(0.5)


GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_exhaustive_oracle_small(n):
    for labels in all_labelings(n):
        for scores in product(GRID, repeat=n):
            assert pr_auc(scores, labels) == pytest.approx(brute_pr_auc(scores, labels), abs=1e-12)
            for target in (0.5, 0.9, 1.0):
                assert fpr_at_recall(scores, labels, target) == pytest.approx(
                    brute_fpr_at_recall(scores, labels, target), abs=1e-12
                )


@given(st.lists(st.tuples(st.sampled_from(GRID), st.integers(0, 1)), min_size=1, max_size=30))
def test_monotone_transform_invariance(pairs):
    scores = np.array([s for s, _ in pairs])
    labels = np.array([l for _, l in pairs])
    if labels.sum() == 0:
        return
    base = pr_auc(scores, labels)
    assert pr_auc(np.exp(3 * scores) - 7, labels) == pytest.approx(base, abs=1e-12)
    assert 0.0 <= base <= 1.0


@given(st.lists(st.floats(0, 1), min_size=2, max_size=20, unique=True), st.data())
def test_inverted_perfect_classifier(scores, data):
    scores = np.sort(np.array(scores))
    cut = data.draw(st.integers(1, len(scores) - 1))
    labels = (np.arange(len(scores)) < cut).astype(int)  # positives hold the lowest scores
    assert pr_auc(-scores, labels) == 1.0
