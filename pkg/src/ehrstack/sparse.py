"""Shared data types: feature vocabulary, row-sparse binary matrix, labeled dataset.

EHR one-hot matrices are overwhelmingly zero (thousands of code columns, a
handful active per patient), so features are stored as per-row sorted arrays
of active column indices. All types are immutable after construction and safe
to share across concurrent workers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class FeatureVocabulary:
    """Ordered, immutable feature-name list with O(1) name -> column lookup.

    Entry names must be unique. The EHR encoder builds vocabularies as
    ``GENDER`` followed by normalized diagnosis codes in lexicographic order;
    models address features only through a vocabulary so serialized models
    stay valid across runs.
    """

    __slots__ = ("entries", "_index")

    def __init__(self, entries: Iterable[str]):
        entries = tuple(entries)
        index = {name: j for j, name in enumerate(entries)}
        if len(index) != len(entries):
            seen, dups = set(), set()
            for name in entries:
                (dups if name in seen else seen).add(name)
            raise ValueError(f"duplicate vocabulary entries: {sorted(dups)}")
        self.entries = entries
        self._index = index

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureVocabulary) and self.entries == other.entries

    def __repr__(self) -> str:
        return f"FeatureVocabulary({len(self)} entries)"

    def index(self, name: str) -> int:
        return self._index[name]

    def fingerprint(self) -> str:
        """Stable hex digest of the ordered entry list."""
        joined = "\x1f".join(self.entries).encode("utf-8")
        return hashlib.sha256(joined).hexdigest()[:16]


class SparseBinaryMatrix:
    """Row-sparse 0/1 matrix: per row, a sorted array of active column indices."""

    __slots__ = ("n_rows", "n_cols", "rows")

    def __init__(self, rows: Sequence[np.ndarray], n_cols: int):
        """Rows must already be validated int64 arrays; use the constructors."""
        self.rows = tuple(rows)
        self.n_rows = len(self.rows)
        self.n_cols = int(n_cols)

    @classmethod
    def from_rows(cls, rows: Iterable[Iterable[int]], n_cols: int) -> "SparseBinaryMatrix":
        """Build from per-row index collections; sorts and validates each row.

        Raises ValueError on out-of-range or duplicate indices (a duplicate
        would make the dense reconstruction non-binary).
        """
        n_cols = int(n_cols)
        if n_cols < 0:
            raise ValueError("n_cols must be non-negative")
        out = []
        for i, raw in enumerate(rows):
            idx = np.asarray(sorted(raw), dtype=np.int64)
            if idx.size:
                if idx[0] < 0 or idx[-1] >= n_cols:
                    bad = int(idx[0]) if idx[0] < 0 else int(idx[-1])
                    raise ValueError(f"row {i}: column index {bad} outside [0, {n_cols})")
                if np.any(idx[1:] == idx[:-1]):
                    dup = int(idx[np.flatnonzero(idx[1:] == idx[:-1])[0]])
                    raise ValueError(f"row {i}: duplicate column index {dup}")
            idx.flags.writeable = False
            out.append(idx)
        return cls(out, n_cols)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "SparseBinaryMatrix":
        dense = np.asarray(dense)
        if dense.ndim != 2:
            raise ValueError("expected a 2-d array")
        if not np.isin(dense, (0, 1)).all():
            raise ValueError("dense input must contain only 0/1")
        return cls.from_rows((np.flatnonzero(r) for r in dense), dense.shape[1])

    def to_dense(self, dtype=np.uint8) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=dtype)
        for i, idx in enumerate(self.rows):
            out[i, idx] = 1
        return out

    def row(self, i: int) -> np.ndarray:
        return self.rows[i]

    def select_rows(self, idx: Sequence[int]) -> "SparseBinaryMatrix":
        """New matrix whose row k is row idx[k] of this one; n_cols unchanged."""
        picked = []
        for k in idx:
            k = int(k)
            if not 0 <= k < self.n_rows:
                raise IndexError(f"row index {k} outside [0, {self.n_rows})")
            picked.append(self.rows[k])
        return SparseBinaryMatrix(picked, self.n_cols)

    def column_support(self, j: int) -> int:
        """Number of rows with a 1 in column j."""
        j = int(j)
        if not 0 <= j < self.n_cols:
            raise IndexError(f"column index {j} outside [0, {self.n_cols})")
        return sum(1 for idx in self.rows if idx.size and np.searchsorted(idx, j) < idx.size and idx[np.searchsorted(idx, j)] == j)

    def nnz(self) -> int:
        return sum(idx.size for idx in self.rows)

    def __repr__(self) -> str:
        return f"SparseBinaryMatrix({self.n_rows}x{self.n_cols}, nnz={self.nnz()})"


@dataclass(frozen=True)
class LabeledDataset:
    """Feature matrix plus aligned binary labels and stable sample identifiers.

    ``vocab_fingerprint`` ties the column space to the vocabulary the features
    were encoded against; model scoring refuses mismatched fingerprints.
    """

    features: SparseBinaryMatrix
    labels: np.ndarray
    sample_ids: tuple
    vocab_fingerprint: str | None = field(default=None)

    def __post_init__(self):
        # always copy: the stored vector is frozen, the caller's must stay usable
        labels = np.array(self.labels, dtype=np.int8)
        if labels.ndim != 1:
            raise ValueError("labels must be a 1-d vector")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise ValueError("labels must be 0/1")
        if not (len(labels) == len(self.sample_ids) == self.features.n_rows):
            raise ValueError(
                f"length mismatch: {self.features.n_rows} rows, "
                f"{len(labels)} labels, {len(self.sample_ids)} sample_ids"
            )
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("sample_ids must be unique")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))

    @property
    def n_samples(self) -> int:
        return self.features.n_rows

    @property
    def n_features(self) -> int:
        return self.features.n_cols

    def positive_rate(self) -> float:
        return float(self.labels.mean()) if self.labels.size else 0.0

    def subset(self, idx: Sequence[int]) -> "LabeledDataset":
        """Row subset in the given order, preserving ids and fingerprint."""
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            features=self.features.select_rows(idx),
            labels=self.labels[idx],
            sample_ids=tuple(self.sample_ids[int(k)] for k in idx),
            vocab_fingerprint=self.vocab_fingerprint,
        )
