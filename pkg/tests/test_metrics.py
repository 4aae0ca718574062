import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgcn.errors import ConfigurationError, UndefinedMetricError
from pgcn.metrics import auroc, grid_search_n, roc_curve


def brute_force_auroc(scores, labels):
    """Pairwise count: P(pos > neg) + 0.5·P(pos == neg)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def random_instance(seed, size=200):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size)
    labels[:2] = [0, 1]
    # coarse rounding produces plenty of ties
    scores = np.round(rng.random(size) + 0.3 * labels, int(rng.integers(1, 4)))
    return scores, labels


def test_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_all_ties_give_half():
    assert auroc([0.3] * 10, [0, 1] * 5) == 0.5


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [0, 0])


def test_matches_brute_force_on_seeded_instances():
    for seed in range(50):
        scores, labels = random_instance(seed)
        assert abs(auroc(scores, labels) - brute_force_auroc(scores, labels)) <= 1e-9


def test_label_flip_complement():
    for seed in range(10):
        scores, labels = random_instance(seed)
        assert abs(auroc(scores, labels) + auroc(scores, 1 - labels) - 1.0) <= 1e-12


def test_invariant_under_monotone_transform():
    for seed in range(10):
        scores, labels = random_instance(seed)
        for f in (np.exp, lambda s: 3 * s - 7, lambda s: np.arctan(s) ** 3):
            assert abs(auroc(f(scores), labels) - auroc(scores, labels)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_brute_force_property(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(UndefinedMetricError):
            auroc(scores, labels)
        return
    assert abs(auroc(scores, labels) - brute_force_auroc(scores, labels)) <= 1e-9


def test_roc_curve_area_matches_auroc():
    for seed in range(5):
        scores, labels = random_instance(seed)
        fpr, tpr = roc_curve(scores, labels)
        assert fpr[0] == tpr[0] == 0 and fpr[-1] == tpr[-1] == 1
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
        area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
        assert area == pytest.approx(auroc(scores, labels), abs=1e-12)


def test_grid_search_single_candidate():
    res = grid_search_n([5], lambda n: (0.7, 0.6))
    assert res.best_n == 5 and res.table == [(5, 0.7, 0.6)]


def test_grid_search_picks_best_and_breaks_ties_low():
    table = {4: (0.80, 0.9), 7: (0.95, 0.8), 9: (0.95, 0.99)}
    res = grid_search_n([9, 7, 4], lambda n: table[n])
    assert res.best_n == 7
    assert [row[0] for row in res.table] == [4, 7, 9]
    assert grid_search_n([7, 4], lambda n: (0.5, 0.5)).best_n == 4


def test_grid_search_validates_candidates():
    with pytest.raises(ConfigurationError):
        grid_search_n([2, 4], lambda n: (0.5, 0.5))
    with pytest.raises(ConfigurationError):
        grid_search_n([], lambda n: (0.5, 0.5))
