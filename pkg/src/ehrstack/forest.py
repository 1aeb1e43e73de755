"""Bagged decision trees on binary features with Gini splits and importances.

Each tree trains on its own bootstrap sample (size = dataset size, drawn with
replacement); at every node ceil(sqrt(p)) candidate features are resampled and
the split maximizing the Gini impurity decrease wins, ties going to the lowest
feature index. Binary features make every split a two-way membership test, so
there is no threshold search. Forest probabilities are the plain average of
per-tree leaf probabilities, thresholded at 0.5 (boundary counts as positive).

Per-tree randomness derives from (root seed, tree index), which keeps a forest
identical whether trees are fit on one worker or eight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .rng import RngPlan
from .sparse import LabeledDataset, SparseBinaryMatrix


@dataclass
class Tree:
    """Flat array form of one decision tree.

    feature[i] is the split column, or -1 at a leaf. zero/one children route
    rows by the split feature's value. Leaves carry the positive fraction of
    their (bootstrap-weighted) training samples.
    """

    feature: np.ndarray
    child_zero: np.ndarray
    child_one: np.ndarray
    leaf_prob: np.ndarray
    leaf_count: np.ndarray

    def n_nodes(self) -> int:
        return self.feature.size

    def predict_row(self, active: np.ndarray) -> float:
        node = 0
        while self.feature[node] >= 0:
            j = self.feature[node]
            pos = np.searchsorted(active, j)
            hit = pos < active.size and active[pos] == j
            node = self.child_one[node] if hit else self.child_zero[node]
        return float(self.leaf_prob[node])

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "child_zero": self.child_zero.tolist(),
            "child_one": self.child_one.tolist(),
            "leaf_prob": self.leaf_prob.tolist(),
            "leaf_count": self.leaf_count.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            child_zero=np.asarray(d["child_zero"], dtype=np.int64),
            child_one=np.asarray(d["child_one"], dtype=np.int64),
            leaf_prob=np.asarray(d["leaf_prob"], dtype=np.float64),
            leaf_count=np.asarray(d["leaf_count"], dtype=np.int64),
        )


@dataclass
class Forest:
    trees: list[Tree]
    n_features: int
    tree_seeds: list[int]
    importance_raw: np.ndarray = field(repr=False)
    vocab_fingerprint: str | None = None

    def n_trees(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        return {
            "kind": "random_forest",
            "n_features": self.n_features,
            "tree_seeds": list(self.tree_seeds),
            "vocab_fingerprint": self.vocab_fingerprint,
            "importance_raw": self.importance_raw.tolist(),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            n_features=int(d["n_features"]),
            tree_seeds=[int(s) for s in d["tree_seeds"]],
            importance_raw=np.asarray(d["importance_raw"], dtype=np.float64),
            vocab_fingerprint=d.get("vocab_fingerprint"),
        )


def bootstrap_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform draws from [0, n) with replacement."""
    if n < 1:
        raise ValueError("cannot bootstrap an empty dataset")
    return rng.integers(0, n, size=n)


def _gini(pos: float, total: float) -> float:
    if total <= 0:
        return 0.0
    q = pos / total
    return 2.0 * q * (1.0 - q)


class _TreeBuilder:
    """Grows one tree on a dense 0/1 view of the bootstrap sample."""

    def __init__(self, dense: np.ndarray, y: np.ndarray, n_candidates: int,
                 rng: np.random.Generator, max_depth: int | None, min_samples_split: int):
        self.dense = dense
        self.y = y
        self.n_candidates = n_candidates
        self.rng = rng
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.n_root = y.size
        self.feature: list[int] = []
        self.child_zero: list[int] = []
        self.child_one: list[int] = []
        self.leaf_prob: list[float] = []
        self.leaf_count: list[int] = []
        self.importance = np.zeros(dense.shape[1])

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.child_zero.append(-1)
        self.child_one.append(-1)
        self.leaf_prob.append(0.0)
        self.leaf_count.append(0)
        return len(self.feature) - 1

    def grow(self, sample_rows: np.ndarray, depth: int = 0) -> int:
        node = self._new_node()
        m = sample_rows.size
        pos = int(self.y[sample_rows].sum())
        self.leaf_count[node] = m

        at_depth_cap = self.max_depth is not None and depth >= self.max_depth
        if pos in (0, m) or m < self.min_samples_split or at_depth_cap:
            self.leaf_prob[node] = pos / m
            return node

        sub = self.dense[sample_rows]
        candidates = np.sort(self.rng.choice(self.dense.shape[1], size=self.n_candidates, replace=False))
        ones = sub[:, candidates].sum(axis=0, dtype=np.int64)
        pos_ones = (sub[:, candidates] * self.y[sample_rows][:, None]).sum(axis=0, dtype=np.int64)

        parent = _gini(pos, m)
        with np.errstate(invalid="ignore", divide="ignore"):
            q1 = np.where(ones > 0, pos_ones / np.maximum(ones, 1), 0.0)
            zeros = m - ones
            q0 = np.where(zeros > 0, (pos - pos_ones) / np.maximum(zeros, 1), 0.0)
        child_impurity = (ones / m) * 2 * q1 * (1 - q1) + (zeros / m) * 2 * q0 * (1 - q0)
        decrease = parent - child_impurity
        splittable = (ones > 0) & (ones < m)
        if not splittable.any():
            self.leaf_prob[node] = pos / m
            return node

        decrease = np.where(splittable, decrease, -np.inf)
        # argmax returns the first maximum; candidates are sorted, so ties
        # already resolve to the lowest feature index.
        best = int(np.argmax(decrease))
        j = int(candidates[best])
        self.importance[j] += (m / self.n_root) * float(decrease[best])

        mask = sub[:, j].astype(bool)
        self.feature[node] = j
        self.child_one[node] = self.grow(sample_rows[mask], depth + 1)
        self.child_zero[node] = self.grow(sample_rows[~mask], depth + 1)
        return node

    def build(self) -> Tree:
        self.grow(np.arange(self.y.size))
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int64),
            child_zero=np.asarray(self.child_zero, dtype=np.int64),
            child_one=np.asarray(self.child_one, dtype=np.int64),
            leaf_prob=np.asarray(self.leaf_prob, dtype=np.float64),
            leaf_count=np.asarray(self.leaf_count, dtype=np.int64),
        )


def fit_forest(
    data: LabeledDataset,
    n_trees: int = 100,
    rng_plan: RngPlan | int = 0,
    max_depth: int | None = None,
    min_samples_split: int = 2,
) -> Forest:
    """Fit a bagged forest; both classes must be present.

    Args:
        data: training rows over a fixed vocabulary.
        n_trees: ensemble size.
        rng_plan: an RngPlan (or bare root seed) from which per-tree seeds are
            derived as child("tree", t); tree t is identical at any worker count.
        max_depth: optional depth cap; default grows to purity.
        min_samples_split: nodes smaller than this become leaves.
    """
    if n_trees < 1:
        raise ValueError("need at least one tree")
    y = data.labels.astype(np.int64)
    if y.min() == y.max():
        raise ValueError("training data contains a single class")
    plan = rng_plan if isinstance(rng_plan, RngPlan) else RngPlan(int(rng_plan))

    dense = data.features.to_dense(dtype=np.int64)
    p = data.n_features
    n_candidates = max(1, math.ceil(math.sqrt(p)))

    trees = []
    seeds = []
    importance = np.zeros(p)
    for t in range(n_trees):
        seed = plan.child_seed("tree", t)
        rng = np.random.Generator(np.random.PCG64(seed))
        rows = bootstrap_indices(y.size, rng)
        builder = _TreeBuilder(dense[rows], y[rows], n_candidates, rng,
                               max_depth, min_samples_split)
        trees.append(builder.build())
        seeds.append(seed)
        importance += builder.importance

    return Forest(
        trees=trees,
        n_features=p,
        tree_seeds=seeds,
        importance_raw=importance,
        vocab_fingerprint=data.vocab_fingerprint,
    )


def predict_proba(forest: Forest, active: Sequence[int]) -> float:
    """Mean of per-tree leaf probabilities for one sparse row."""
    active = np.asarray(active, dtype=np.int64)
    total = 0.0
    for tree in forest.trees:
        total += tree.predict_row(active)
    return total / len(forest.trees)


def predict_proba_batch(forest: Forest, features: SparseBinaryMatrix) -> np.ndarray:
    if features.n_cols != forest.n_features:
        raise ValueError(
            f"feature count mismatch: matrix has {features.n_cols}, forest expects {forest.n_features}"
        )
    return np.array([predict_proba(forest, features.row(i)) for i in range(features.n_rows)])


def predict_label(forest: Forest, active: Sequence[int], threshold: float = 0.5) -> int:
    """1 iff the forest probability is >= threshold (boundary is positive)."""
    return int(predict_proba(forest, active) >= threshold)


def gini_importance(forest: Forest) -> np.ndarray:
    """Per-feature total weighted impurity decrease, normalized to sum to 1.

    Returns the zero vector when no tree ever split.
    """
    total = forest.importance_raw.sum()
    if total <= 0:
        return np.zeros_like(forest.importance_raw)
    return forest.importance_raw / total
