import itertools

import numpy as np
import pytest

from pfsfusion import forest as F
from pfsfusion.errors import UndefinedMetricError, ValidationError


def gini_weighted(y_left, y_right):
    def g(y):
        if len(y) == 0:
            return 0.0
        p = np.mean(y)
        return 1 - p ** 2 - (1 - p) ** 2
    n = len(y_left) + len(y_right)
    return (len(y_left) * g(y_left) + len(y_right) * g(y_right)) / n


def test_pure_leaf():
    t = F.fit_tree(np.random.default_rng(0).normal(size=(6, 4)), np.ones(6))
    assert t.feature == [-1] and t.prob == [1.0]


def test_separable_1d():
    X = np.array([[-3.0], [-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0, 0, 0, 1, 1])
    t = F.fit_tree(X, y, F.ForestSpec(features_per_split=1))
    assert t.depth == 1 and t.threshold[0] == 0.0
    assert np.all((t.predict_proba(X) >= 0.5) == y)


def test_root_split_minimal_gini_exhaustive():
    rng = np.random.default_rng(3)
    for trial in range(20):
        X = np.round(rng.normal(size=(8, 4)), 1)
        y = rng.integers(0, 2, 8)
        if y.min() == y.max():
            continue
        t = F.fit_tree(X, y, F.ForestSpec(features_per_split=4), np.random.default_rng(trial))
        best = min(
            gini_weighted(y[X[:, f] <= thr], y[X[:, f] > thr])
            for f in range(4)
            for a, b in itertools.pairwise(np.unique(X[:, f]))
            for thr in [0.5 * (a + b)]
        )
        f, thr = t.feature[0], t.threshold[0]
        assert gini_weighted(y[X[:, f] <= thr], y[X[:, f] > thr]) == pytest.approx(best, abs=1e-12)


def test_tie_break_lowest_feature_then_threshold():
    # features 0 and 1 are identical copies; both split perfectly at two thresholds? only one
    X = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    y = np.array([0, 0, 1, 1])
    t = F.fit_tree(X, y, F.ForestSpec(features_per_split=2))
    assert t.feature[0] == 0 and t.threshold[0] == 1.5


def test_unrestricted_tree_fits_training_set():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(60, 4))
    y = rng.integers(0, 2, 60)
    t = F.fit_tree(X, y, F.ForestSpec(), rng)
    assert np.all((t.predict_proba(X) >= 0.5) == y)


def test_empty():
    with pytest.raises(ValidationError):
        F.fit_tree(np.zeros((0, 4)), np.zeros(0))


def test_single_tree_forest_equals_tree():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(30, 4)), rng.integers(0, 2, 30)
    spec = F.ForestSpec(n_trees=1, bootstrap=False, seed=9)
    forest = F.fit_forest(X, y, spec)
    tree = F.fit_tree(X, y, spec, np.random.default_rng(np.random.SeedSequence(9).spawn(1)[0]))
    assert forest.trees[0] == tree


def test_forest_deterministic_and_serializable():
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(40, 4)), rng.integers(0, 2, 40)
    a = F.fit_forest(X, y, F.ForestSpec(n_trees=10, seed=1))
    b = F.fit_forest(X, y, F.ForestSpec(n_trees=10, seed=1))
    assert a.to_json() == b.to_json()
    back = F.Forest.from_json(a.to_json())
    np.testing.assert_array_equal(back.predict_proba(X), a.predict_proba(X))


def test_oob_accuracy_separable():
    rng = np.random.default_rng(7)
    X = rng.normal(size=(100, 4))
    y = (X[:, 2] > 0).astype(int)
    f = F.fit_forest(X, y, F.ForestSpec(n_trees=30, seed=2))
    assert f.oob_accuracy > 0.9


def test_predict_proba_is_tree_mean():
    rng = np.random.default_rng(8)
    X, y = rng.normal(size=(40, 4)), rng.integers(0, 2, 40)
    f = F.fit_forest(X, y, F.ForestSpec(n_trees=7, seed=3))
    p = f.predict_proba(X)
    manual = sum(t.predict_proba(X) for t in f.trees) / 7
    np.testing.assert_allclose(p, manual, atol=1e-9)
    assert np.all((p >= 0) & (p <= 1))


def test_agreeing_and_disagreeing_trees():
    leaf = lambda p: F.DecisionTree(feature=[-1], threshold=[0.0], left=[-1], right=[-1], prob=[p])
    spec = F.ForestSpec(n_trees=2)
    assert F.forest_predict_proba(F.Forest([leaf(0.25), leaf(0.25)], spec), [[0, 0, 0, 0]])[0] == 0.25
    assert F.forest_predict_proba(F.Forest([leaf(0.0), leaf(1.0)], spec), [[0, 0, 0, 0]])[0] == 0.5


class TestPermutationImportance:
    def setup_method(self):
        rng = np.random.default_rng(10)
        self.X = rng.normal(size=(500, 4))
        self.y = (self.X[:, 1] + 0.5 * rng.normal(size=500) > 0).astype(int)
        self.X[:, 3] = self.y + 0.01 * rng.normal(size=500)
        self.model = lambda X: 1 / (1 + np.exp(-(1.5 * X[:, 1] + 3 * X[:, 3] + 0.0 * X[:, 0])))

    def test_noise_feature_near_zero(self):
        imp = F.permutation_importance(self.model, self.X, self.y, rng=np.random.default_rng(0))
        assert abs(imp[0]) < 0.05 and imp[2] == 0.0

    def test_label_copy_dominates(self):
        imp = F.permutation_importance(self.model, self.X, self.y, rng=np.random.default_rng(0))
        assert int(np.argmax(imp)) == 3

    def test_identity_permutation(self):
        imp = F.permutation_importance(self.model, self.X, self.y, permute=lambda r: r)
        assert np.all(imp == 0.0)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            F.permutation_importance(self.model, self.X, np.ones(500))
