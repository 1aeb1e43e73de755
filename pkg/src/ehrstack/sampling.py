"""Balanced undersampling, stratified splits, and the two evaluation sets.

All draws flow through an explicit numpy Generator, so every split is
reproducible bit-for-bit from a seed. The two test-set builders take the
training index list and refuse any overlap outright.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sparse import LabeledDataset


def stratified_allocation(n: int, strata: Sequence[int]) -> list[int]:
    """Proportional allocation of n draws across strata of sizes N_h.

    Uses largest-remainder rounding (ties broken by lower stratum index), so
    the allocations always sum to exactly n and never exceed a stratum's size.
    """
    sizes = [int(s) for s in strata]
    if any(s < 0 for s in sizes):
        raise ValueError("stratum sizes must be non-negative")
    total = sum(sizes)
    if n < 0 or n > total:
        raise ValueError(f"cannot draw {n} from population of {total}")
    if total == 0:
        return []

    raw = [n * s / total for s in sizes]
    alloc = [int(x) for x in raw]
    remainders = [(r - a, -h) for h, (r, a) in enumerate(zip(raw, alloc))]
    short = n - sum(alloc)
    # floor(n*N_h/N) <= N_h and a fractional remainder implies headroom, so
    # the +1 below cannot breach a stratum's capacity.
    for _, neg_h in sorted(remainders, reverse=True)[:short]:
        alloc[-neg_h] += 1
    return alloc


@dataclass(frozen=True)
class StratumSpec:
    """A resolved stratified draw: stratum sizes and the allocations chosen."""

    n: int
    stratum_sizes: tuple
    allocations: tuple

    def __post_init__(self):
        if sum(self.allocations) != self.n:
            raise ValueError("allocations must sum to the draw size")
        if any(a > s for a, s in zip(self.allocations, self.stratum_sizes)):
            raise ValueError("an allocation exceeds its stratum size")

    @property
    def total_population(self) -> int:
        return sum(self.stratum_sizes)

    @classmethod
    def allocate(cls, n: int, strata: Sequence[int]) -> "StratumSpec":
        return cls(n=n, stratum_sizes=tuple(int(s) for s in strata),
                   allocations=tuple(stratified_allocation(n, strata)))


def reserve_holdout(
    cases: Sequence[int], k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw k case indices uniformly without replacement for the holdout.

    Returns (test_cases, train_cases), each sorted ascending.
    """
    cases = np.asarray(cases, dtype=np.int64)
    if k < 0 or k > cases.size:
        raise ValueError(f"holdout size {k} exceeds {cases.size} available cases")
    picked = rng.choice(cases, size=k, replace=False)
    test = np.sort(picked)
    train = np.setdiff1d(cases, test)
    return test, train


def undersample_balanced(
    cases: Sequence[int], controls: Sequence[int], rng: np.random.Generator
) -> np.ndarray:
    """All cases plus an equal-size uniform draw of controls, shuffled."""
    cases = np.asarray(cases, dtype=np.int64)
    controls = np.asarray(controls, dtype=np.int64)
    if controls.size < cases.size:
        raise ValueError(
            f"need at least {cases.size} controls to balance, have {controls.size}"
        )
    chosen = rng.choice(controls, size=cases.size, replace=False)
    combined = np.r_[cases, chosen]
    rng.shuffle(combined)
    return combined


def stratified_kfold(labels, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Per-sample fold ids in [0, n_folds) preserving class proportions.

    Each class is shuffled then dealt into folds as evenly as possible, so the
    per-fold count of every class differs by at most 1 across folds.
    """
    labels = np.asarray(labels)
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    assignments = np.full(labels.size, -1, dtype=np.int64)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < n_folds:
            raise ValueError(
                f"class {int(cls)} has {members.size} members, fewer than {n_folds} folds"
            )
        members = members[rng.permutation(members.size)]
        assignments[members] = np.arange(members.size) % n_folds
    return assignments


@dataclass(frozen=True)
class SplitPlan:
    """Training/test index split plus per-training-sample fold assignments."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    fold_assignments: np.ndarray

    def __post_init__(self):
        train = np.asarray(self.train_indices, dtype=np.int64)
        test = np.asarray(self.test_indices, dtype=np.int64)
        folds = np.asarray(self.fold_assignments, dtype=np.int64)
        if np.intersect1d(train, test).size:
            raise ValueError("train and test indices overlap")
        if folds.size != train.size:
            raise ValueError("fold assignments must cover exactly the training indices")
        object.__setattr__(self, "train_indices", train)
        object.__setattr__(self, "test_indices", test)
        object.__setattr__(self, "fold_assignments", folds)

    def n_folds(self) -> int:
        return int(self.fold_assignments.max()) + 1 if self.fold_assignments.size else 0

    def to_json(self, seed: int | None = None) -> str:
        payload = {
            "seed": seed,
            "train_indices": self.train_indices.tolist(),
            "test_indices": self.test_indices.tolist(),
            "fold_assignments": self.fold_assignments.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        payload = json.loads(text)
        return cls(
            train_indices=np.asarray(payload["train_indices"], dtype=np.int64),
            test_indices=np.asarray(payload["test_indices"], dtype=np.int64),
            fold_assignments=np.asarray(payload["fold_assignments"], dtype=np.int64),
        )


def _guard_no_overlap(chosen: np.ndarray, train_indices, what: str) -> None:
    if train_indices is None:
        return
    overlap = np.intersect1d(chosen, np.asarray(train_indices, dtype=np.int64))
    if overlap.size:
        raise ValueError(f"{what} overlaps training indices: {overlap[:10].tolist()}")


def build_testing_set_regular(
    data: LabeledDataset,
    test_cases: Sequence[int],
    controls_pool: Sequence[int],
    rng: np.random.Generator,
    train_indices: Sequence[int] | None = None,
) -> tuple[LabeledDataset, np.ndarray]:
    """Balanced test set: the held-out cases plus a uniform control draw.

    Returns the dataset and the row indices it was built from (cases first).
    Any overlap between the chosen rows and ``train_indices`` is rejected.
    """
    test_cases = np.asarray(test_cases, dtype=np.int64)
    pool = np.asarray(controls_pool, dtype=np.int64)
    if pool.size < test_cases.size:
        raise ValueError(f"control pool {pool.size} smaller than {test_cases.size} cases")
    chosen_controls = np.sort(rng.choice(pool, size=test_cases.size, replace=False))
    idx = np.r_[test_cases, chosen_controls]
    _guard_no_overlap(idx, train_indices, "regular testing set")
    return data.subset(idx), idx


def build_testing_set_hard(
    data: LabeledDataset,
    test_cases: Sequence[int],
    controls_pool: Sequence[int],
    top_features: Sequence[int],
    rng: np.random.Generator,
    train_indices: Sequence[int] | None = None,
) -> tuple[LabeledDataset, np.ndarray]:
    """Balanced test set whose controls each carry >= 2 distinct top features.

    ``top_features`` is the head of the feature-importance ranking (column
    indices). Qualification counts distinct features present, not occurrences.
    Rejected outright if fewer controls qualify than cases are supplied.
    """
    test_cases = np.asarray(test_cases, dtype=np.int64)
    pool = np.asarray(controls_pool, dtype=np.int64)
    top = np.unique(np.asarray(top_features, dtype=np.int64))
    qualifying = np.array(
        [i for i in pool if np.isin(data.features.row(int(i)), top).sum() >= 2],
        dtype=np.int64,
    )
    if qualifying.size < test_cases.size:
        raise ValueError(
            f"only {qualifying.size} controls carry >=2 of the top features; "
            f"need {test_cases.size}"
        )
    chosen_controls = np.sort(rng.choice(qualifying, size=test_cases.size, replace=False))
    idx = np.r_[test_cases, chosen_controls]
    _guard_no_overlap(idx, train_indices, "hard testing set")
    return data.subset(idx), idx
