"""CART trees with Gini splits, a bagged forest, and permutation importance."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .stats import auroc


@dataclass
class ForestSpec:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(p))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValidationError("a forest needs at least one tree")
        if self.min_leaf < 1:
            raise ValidationError("min_leaf must be >= 1")


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature[i] == -1`` marks a leaf holding ``prob[i]`` = P(y=1)."""

    feature: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    left: list = field(default_factory=list)
    right: list = field(default_factory=list)
    prob: list = field(default_factory=list)
    max_depth: int | None = None

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        node = np.zeros(X.shape[0], dtype=int)
        feat = np.asarray(self.feature)
        thr = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        active = feat[node] >= 0
        while active.any():
            idx = np.nonzero(active)[0]
            f = feat[node[idx]]
            go_left = X[idx, f] <= thr[node[idx]]
            node[idx] = np.where(go_left, left[node[idx]], right[node[idx]])
            active = feat[node] >= 0
        return np.asarray(self.prob)[node]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("feature", "threshold", "left", "right", "prob", "max_depth")}


def _best_split(X: np.ndarray, y: np.ndarray, features, min_leaf: int):
    """Lowest weighted Gini over midpoints of sorted distinct values.

    Features are scanned in ascending index order and thresholds ascending, and
    only a strictly better score replaces the incumbent, so ties keep the lowest
    feature index and then the smallest threshold.
    """
    n = y.size
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="mergesort")
        xs, ys = X[order, f], y[order]
        pos = np.cumsum(ys)[:-1]
        nl = np.arange(1, n)
        nr = n - nl
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        tot = ys.sum()
        neg_l = nl - pos
        pos_r = tot - pos
        neg_r = nr - pos_r
        # weighted Gini * n = n - sum(c_l^2)/n_l - sum(c_r^2)/n_r
        score = n - (pos ** 2 + neg_l ** 2) / nl - (pos_r ** 2 + neg_r ** 2) / nr
        score = np.where(valid, score, np.inf)
        k = int(np.argmin(score))
        if best is None or score[k] < best[0] - 1e-12:
            best = (float(score[k]), f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def fit_tree(X, y, spec: ForestSpec | None = None, rng: np.random.Generator | None = None) -> DecisionTree:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValidationError("fit_tree needs a non-empty 2D feature matrix")
    if y.shape != (X.shape[0],) or not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be a 0/1 vector matching X")
    spec = spec or ForestSpec()
    rng = rng or np.random.default_rng(spec.seed)
    p = X.shape[1]
    k = spec.features_per_split or math.ceil(math.sqrt(p))
    k = min(k, p)
    tree = DecisionTree(max_depth=spec.max_depth)

    def new_node() -> int:
        for arr, v in ((tree.feature, -1), (tree.threshold, 0.0), (tree.left, -1), (tree.right, -1), (tree.prob, 0.0)):
            arr.append(v)
        return len(tree.feature) - 1

    stack = [(new_node(), np.arange(X.shape[0]), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        yi = y[idx]
        tree.prob[nid] = float(yi.mean())
        if yi.min() == yi.max() or (spec.max_depth is not None and depth >= spec.max_depth):
            continue
        subset = rng.choice(p, size=k, replace=False)
        split = _best_split(X[idx], yi, subset, spec.min_leaf)
        if split is None and k < p:
            # every sampled feature is constant here; fall back to the rest
            split = _best_split(X[idx], yi, np.setdiff1d(np.arange(p), subset), spec.min_leaf)
        if split is None:
            continue
        _, f, thr = split
        mask = X[idx, f] <= thr
        tree.feature[nid] = int(f)
        tree.threshold[nid] = float(thr)
        li, ri = new_node(), new_node()
        tree.left[nid], tree.right[nid] = li, ri
        stack.append((ri, idx[~mask], depth + 1))
        stack.append((li, idx[mask], depth + 1))
    return tree


@dataclass
class Forest:
    trees: list
    spec: ForestSpec
    oob_accuracy: float | None = None

    def predict_proba(self, X) -> np.ndarray:
        return forest_predict_proba(self, X)

    def to_json(self) -> str:
        return json.dumps({"spec": self.spec.__dict__, "trees": [t.to_dict() for t in self.trees]})

    @classmethod
    def from_json(cls, text: str) -> Forest:
        d = json.loads(text)
        return cls([DecisionTree(**t) for t in d["trees"]], ForestSpec(**d["spec"]))


def fit_forest(X, y, spec: ForestSpec | None = None) -> Forest:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    spec = spec or ForestSpec()
    n = X.shape[0]
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.n_trees)
    trees = []
    votes = np.zeros(n)
    counts = np.zeros(n)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, size=n) if spec.bootstrap else np.arange(n)
        tree = fit_tree(X[idx], y[idx], spec, rng)
        trees.append(tree)
        if spec.bootstrap:
            oob = np.setdiff1d(np.arange(n), idx)
            if oob.size:
                votes[oob] += tree.predict_proba(X[oob])
                counts[oob] += 1
    oob_acc = None
    if spec.bootstrap and counts.any():
        seen = counts > 0
        oob_acc = float(np.mean((votes[seen] / counts[seen] >= 0.5) == y[seen]))
    return Forest(trees, spec, oob_acc)


def forest_predict_proba(forest: Forest, X) -> np.ndarray:
    """Mean of the per-tree leaf probabilities."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.mean([t.predict_proba(X) for t in forest.trees], axis=0)


def permutation_importance(predict_proba: Callable[[np.ndarray], np.ndarray], X, y, repeats: int = 10,
                           rng: np.random.Generator | None = None, metric=auroc,
                           permute: Callable[[np.ndarray], np.ndarray] | None = None) -> np.ndarray:
    """Drop in ``metric`` when one column is shuffled, averaged over ``repeats`` shuffles.

    ``permute`` maps an index array to a permutation of it (defaults to
    ``rng.permutation``); it exists so tests can force specific shuffles.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if y.min() == y.max():
        raise UndefinedMetricError("permutation importance needs both classes in y")
    rng = rng or np.random.default_rng(0)
    permute = permute or rng.permutation
    base = metric(predict_proba(X), y)
    rows = np.arange(X.shape[0])
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        drops = []
        for _ in range(repeats):
            Xp = X.copy()
            Xp[:, j] = X[permute(rows), j]
            drops.append(base - metric(predict_proba(Xp), y))
        out[j] = float(np.mean(drops))
    return out
