"""Tertile classes of regional indicators and a random-forest classifier."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._parallel import ordered_map
from ._rng import substream
from .regression import ModelData

log = logging.getLogger(__name__)

TERTILES = ("low", "medium", "high")


def gini(counts) -> float:
    """Gini impurity sum p(1 - p) of a vector of class counts."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - p @ p)


@dataclass
class TertileLabeling:
    breaks: tuple[float, float]
    labels: np.ndarray

    def sizes(self) -> dict[str, int]:
        return {c: int(np.sum(self.labels == c)) for c in TERTILES}


def tertile_labels(values) -> TertileLabeling:
    """Label values low/medium/high by rank.

    Ranks below floor(n/3) are low, below floor(2n/3) medium, the rest
    high. Equal values are ordered by position, so classes stay
    equal-sized even under ties. The breaks are the values at those ranks.
    """
    values = np.asarray(values, dtype=float)
    n = len(values)
    if n < 3:
        raise ValueError(f"need at least 3 values, got {n}")
    order = np.argsort(values, kind="stable")
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    b1, b2 = n // 3, 2 * n // 3
    labels = np.where(rank < b1, "low", np.where(rank < b2, "medium", "high")).astype(object)
    if np.all(values == values[0]):
        log.warning("all values are equal; tertile classes are assigned by position only")
    sorted_vals = values[order]
    return TertileLabeling((float(sorted_vals[b1]), float(sorted_vals[b2])), labels)


@dataclass
class Tree:
    feature: np.ndarray  # -1 at leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # per node class counts of the bootstrap sample
    importance: np.ndarray  # impurity decrease per feature, weighted by node share

    def leaves(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[node] >= 0)
        while len(active):
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.feature[node[active]] >= 0]
        return node

    def predict_index(self, X: np.ndarray) -> np.ndarray:
        # argmax takes the first maximum: the smallest class label on ties
        return np.argmax(self.counts[self.leaves(X)], axis=1)


def _best_split(Xn, onehot, parent_gini, features, min_leaf):
    n = len(onehot)
    total = onehot.sum(axis=0)
    nl = np.arange(1, n, dtype=float)
    nr = n - nl
    size_ok = (nl >= min_leaf) & (nr >= min_leaf)
    best = None
    for f in features:
        order = np.argsort(Xn[:, f], kind="stable")
        xs = Xn[order, f]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        left = np.cumsum(onehot[order], axis=0)[:-1]
        right = total - left
        child = (nl - (left * left).sum(axis=1) / nl + nr - (right * right).sum(axis=1) / nr) / n
        child[~valid] = np.inf
        i = int(np.argmin(child))
        decrease = parent_gini - child[i]
        if best is None or decrease > best[0]:
            lo, hi = xs[i], xs[i + 1]
            thr = lo + (hi - lo) / 2
            if not lo <= thr < hi:
                thr = lo
            best = (decrease, f, thr, order[: i + 1], order[i + 1:])
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int, mtry: int, min_leaf: int,
              rng: np.random.Generator) -> Tree:
    """One CART tree grown to purity on (X, y) with ``mtry`` candidate features per node.

    When none of the sampled features admits a split, the remaining ones
    are tried before the node is made a leaf.
    """
    n, p = X.shape
    onehot_all = np.eye(n_classes)[y]
    feature, threshold, left, right, counts = [], [], [], [], []
    importance = np.zeros(p)

    def new_node(idx):
        feature.append(-1)
        threshold.append(math.nan)
        left.append(-1)
        right.append(-1)
        counts.append(onehot_all[idx].sum(axis=0))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n))]
    while stack:
        node, idx = stack.pop()
        c = counts[node]
        g = gini(c)
        if g == 0 or len(idx) < 2 * min_leaf:
            continue
        perm = rng.permutation(p)
        Xn, oh = X[idx], onehot_all[idx]
        split = _best_split(Xn, oh, g, perm[:mtry], min_leaf)
        if split is None and mtry < p:
            split = _best_split(Xn, oh, g, perm[mtry:], min_leaf)
        if split is None:
            continue
        decrease, f, thr, li, ri = split
        importance[f] += len(idx) / n * decrease
        lnode, rnode = new_node(idx[li]), new_node(idx[ri])
        feature[node], threshold[node], left[node], right[node] = f, thr, lnode, rnode
        stack.append((rnode, idx[ri]))
        stack.append((lnode, idx[li]))
    return Tree(np.array(feature), np.array(threshold), np.array(left), np.array(right),
                np.array(counts), importance)


@dataclass
class ForestModel:
    classes: list[str]
    feature_names: list[str]
    trees: list[Tree]
    trees_requested: int
    features_per_split: int
    min_leaf: int
    seed: int

    @property
    def mean_decrease_gini(self) -> np.ndarray:
        total = np.zeros(len(self.feature_names))
        for t in self.trees:
            total += t.importance
        return total / len(self.trees)

    def importances(self) -> dict[str, float]:
        return dict(zip(self.feature_names, self.mean_decrease_gini.tolist()))

    def importance_ranking(self) -> list[str]:
        return [self.feature_names[j] for j in np.argsort(-self.mean_decrease_gini, kind="stable")]

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        votes = np.zeros((len(X), len(self.classes)), dtype=np.int64)
        rows = np.arange(len(X))
        for t in self.trees:
            np.add.at(votes, (rows, t.predict_index(X)), 1)
        return np.array(self.classes, dtype=object)[np.argmax(votes, axis=1)]


def train_forest(X, labels, trees: int = 200, features_per_split: int | None = None, min_leaf: int = 1,
                 seed: int = 0, workers: int = 1, stream: str = "forest",
                 feature_names: Sequence[str] | None = None) -> ForestModel:
    """Bootstrap-aggregated CART trees; tree t draws from stream (seed, stream, t)."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=object)
    n, p = X.shape
    if len(labels) != n:
        raise ValueError("X and labels differ in length")
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ValueError("need at least two classes to train a classifier")
    if trees < 1 or min_leaf < 1:
        raise ValueError("trees and min_leaf must be at least 1")
    mtry = features_per_split or max(1, int(math.isqrt(p)))
    code = {c: i for i, c in enumerate(classes)}
    y = np.array([code[v] for v in labels], dtype=np.int64)

    def build(t):
        rng = substream(seed, stream, t)
        boot = rng.integers(0, n, size=n)
        return grow_tree(X[boot], y[boot], len(classes), mtry, min_leaf, rng)

    forest = ordered_map(build, range(trees), workers)
    names = list(feature_names) if feature_names is not None else [f"x{j + 1}" for j in range(p)]
    return ForestModel(classes, names, forest, trees, mtry, min_leaf, seed)


@dataclass
class ClassReport:
    classes: list[str]
    confusion: np.ndarray  # rows: true class, columns: predicted class
    recall: np.ndarray
    precision: np.ndarray
    accuracy: float

    def as_dict(self) -> dict:
        return {
            "classes": self.classes,
            "confusion_matrix": self.confusion.tolist(),
            "recall": dict(zip(self.classes, self.recall.tolist())),
            "precision": dict(zip(self.classes, self.precision.tolist())),
            "accuracy": self.accuracy,
        }


def class_report(true, predicted, classes: Sequence[str] | None = None) -> ClassReport:
    true = np.asarray(true, dtype=object)
    predicted = np.asarray(predicted, dtype=object)
    if classes is None:
        seen = set(true.tolist()) | set(predicted.tolist())
        classes = list(TERTILES) if seen <= set(TERTILES) else sorted(seen)
    classes = list(classes)
    index = {c: i for i, c in enumerate(classes)}
    k = len(classes)
    cm = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true, predicted):
        cm[index[t], index[p]] += 1
    diag = np.diag(cm).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(cm.sum(axis=1) > 0, diag / cm.sum(axis=1), math.nan)
        precision = np.where(cm.sum(axis=0) > 0, diag / cm.sum(axis=0), math.nan)
    total = cm.sum()
    return ClassReport(classes, cm, recall, precision, float(diag.sum() / total) if total else math.nan)


def evaluate(model: ForestModel, X_test, labels_test) -> ClassReport:
    return class_report(labels_test, model.predict(X_test))


def random_split(n: int, train_fraction: float, seed: int, key: str) -> tuple[np.ndarray, np.ndarray]:
    perm = substream(seed, key, "split").permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def classify_indicator(data: ModelData, seed: int, key: str, train_fraction: float = 0.6,
                       trees: int = 200, features_per_split: int | None = None, min_leaf: int = 1,
                       workers: int = 1, shuffle_labels: bool = False) -> dict:
    """Tertile classes of ``data.y``, a fresh split, a forest, and its test report."""
    labels = tertile_labels(data.y).labels
    if shuffle_labels:
        labels = labels[substream(seed, key, "shuffle").permutation(len(labels))]
    train, test = random_split(len(labels), train_fraction, seed, key)
    model = train_forest(data.X[train], labels[train], trees=trees, features_per_split=features_per_split,
                         min_leaf=min_leaf, seed=seed, workers=workers, stream=key,
                         feature_names=data.names)
    report = evaluate(model, data.X[test], labels[test])
    return {
        "target": data.target,
        **report.as_dict(),
        "mean_decrease_gini": model.importances(),
        "importance_ranking": model.importance_ranking(),
        "n_train": int(len(train)),
        "n_test": int(len(test)),
        "trees": trees,
        "features_per_split": model.features_per_split,
    }


def run_c1_c2(di: ModelData, pci: ModelData, seed: int, train_fraction: float = 0.6, trees: int = 200,
              features_per_split: int | None = None, min_leaf: int = 1, workers: int = 1) -> dict:
    """C1 classifies deprivation-index tertiles, C2 per-capita-income tertiles."""
    common = dict(train_fraction=train_fraction, trees=trees, features_per_split=features_per_split,
                  min_leaf=min_leaf, workers=workers)
    return {
        "C1": classify_indicator(di, seed, "c1", **common),
        "C2": classify_indicator(pci, seed, "c2", **common),
    }
