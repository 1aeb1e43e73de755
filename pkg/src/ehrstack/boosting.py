"""Histogram-based, leaf-wise gradient-boosted trees for binary log-loss.

Per boosting round the ensemble computes per-sample gradients g = p - y and
Hessians h = p(1 - p) at the current probabilities, accumulates them into
per-feature bin histograms, and repeatedly splits whichever leaf offers the
globally highest gain until the leaf budget is exhausted or no positive gain
remains. Gain and leaf values use the standard second-order objective with an
L2 leaf penalty:

    gain = 1/2 [ GL^2/(HL+lam) + GR^2/(HR+lam) - (GL+GR)^2/(HL+HR+lam) ]
    leaf value = -G/(H+lam)

Raw scores are base_score + eta * sum of per-tree leaf values; probabilities
are the sigmoid of the raw score. Binary features occupy two bins; numeric
inputs are discretized with equal-frequency binning (default 256 bins) so the
same machinery works beyond 0/1 matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import numpy as np

from .rng import RngPlan
from .sparse import LabeledDataset, SparseBinaryMatrix

PROB_EPS = 1e-15  # keeps gradients finite at p in {0,1}


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def grad_hess(p, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient p - y and Hessian p(1 - p) of binary log-loss.

    Probabilities exactly 0 or 1 are clipped to [PROB_EPS, 1 - PROB_EPS].
    """
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return p - y, p * (1.0 - p)


def logloss(labels, probs) -> float:
    """Mean binary cross-entropy."""
    labels = np.asarray(labels, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if labels.shape != probs.shape:
        raise ValueError("labels and probs must have the same length")
    probs = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return float(-(labels * np.log(probs) + (1.0 - labels) * np.log1p(-probs)).mean())


@dataclass(frozen=True)
class BinnedFeatures:
    """Feature matrix discretized to per-feature bin ids.

    kind "binary": bins are the 0/1 values themselves. kind "quantile": bins
    come from equal-frequency edges computed on the training data; bin id is
    the index of the first edge the value does not exceed.
    """

    codes: np.ndarray            # (n, p) small ints
    n_bins: np.ndarray           # per-feature bin count
    kind: str
    edges: tuple = ()            # per-feature upper edges, quantile kind only

    @property
    def n_features(self) -> int:
        return self.codes.shape[1]

    def bin_row(self, values: np.ndarray) -> np.ndarray:
        if self.kind == "binary":
            return values.astype(np.int64)
        return np.array(
            [np.searchsorted(self.edges[j], values[j], side="left")
             for j in range(len(self.edges))],
            dtype=np.int64,
        )


def bin_features(features, max_bins: int = 256) -> BinnedFeatures:
    """Discretize a SparseBinaryMatrix (two bins) or numeric array (quantiles)."""
    if isinstance(features, SparseBinaryMatrix):
        codes = features.to_dense(dtype=np.int64)
        return BinnedFeatures(codes=codes, n_bins=np.full(features.n_cols, 2), kind="binary")

    dense = np.asarray(features, dtype=np.float64)
    if dense.ndim != 2:
        raise ValueError("expected a 2-d feature array")
    n, p = dense.shape
    codes = np.zeros((n, p), dtype=np.int64)
    all_edges = []
    n_bins = np.zeros(p, dtype=np.int64)
    for j in range(p):
        col = dense[:, j]
        qs = np.quantile(col, np.linspace(0, 1, max_bins + 1)[1:-1])
        edges = np.unique(qs)
        codes[:, j] = np.searchsorted(edges, col, side="left")
        all_edges.append(edges)
        n_bins[j] = edges.size + 1
    return BinnedFeatures(codes=codes, n_bins=n_bins, kind="quantile", edges=tuple(all_edges))


@dataclass(frozen=True)
class FeatureHistogram:
    """Per-feature, per-bin accumulated gradient/Hessian sums and counts."""

    g: np.ndarray      # (p, max_bins)
    h: np.ndarray
    count: np.ndarray


def accumulate_histograms(
    codes: np.ndarray, sample_idx: np.ndarray, g: np.ndarray, h: np.ndarray, max_bins: int
) -> FeatureHistogram:
    """Histogram a node's samples over every feature's bins.

    Accumulation runs over a single flattened bincount in fixed sample order,
    so the result is identical no matter how callers schedule work.
    """
    if sample_idx.size == 0:
        raise ValueError("cannot histogram an empty node")
    sub = codes[sample_idx]
    p = sub.shape[1]
    # flat iterates row-major (sample, feature), so per-sample weights repeat p times
    flat = (sub + np.arange(p, dtype=np.int64) * max_bins).ravel()
    size = p * max_bins
    gsum = np.bincount(flat, weights=np.repeat(g[sample_idx], p), minlength=size)
    hsum = np.bincount(flat, weights=np.repeat(h[sample_idx], p), minlength=size)
    cnt = np.bincount(flat, minlength=size)
    return FeatureHistogram(
        g=gsum.reshape(p, max_bins),
        h=hsum.reshape(p, max_bins),
        count=cnt.reshape(p, max_bins).astype(np.int64),
    )


def split_gain(gl, hl, gr, hr, reg_lambda: float):
    """Second-order gain of a (GL,HL)/(GR,HR) split with L2 leaf penalty."""
    gl = np.asarray(gl, dtype=np.float64)
    hl = np.asarray(hl, dtype=np.float64)
    gr = np.asarray(gr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    total = (gl + gr) ** 2 / (hl + hr + reg_lambda)
    gain = 0.5 * (gl**2 / (hl + reg_lambda) + gr**2 / (hr + reg_lambda) - total)
    return gain if gain.ndim else float(gain)


@dataclass
class BoostedTree:
    """Leaf-wise tree over binned features; split sends bin <= threshold left."""

    feature: np.ndarray
    threshold_bin: np.ndarray
    child_left: np.ndarray
    child_right: np.ndarray
    leaf_value: np.ndarray

    def predict_bins(self, bin_row: np.ndarray) -> float:
        node = 0
        while self.feature[node] >= 0:
            if bin_row[self.feature[node]] <= self.threshold_bin[node]:
                node = self.child_left[node]
            else:
                node = self.child_right[node]
        return float(self.leaf_value[node])

    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold_bin": self.threshold_bin.tolist(),
            "child_left": self.child_left.tolist(),
            "child_right": self.child_right.tolist(),
            "leaf_value": self.leaf_value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedTree":
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int64),
            threshold_bin=np.asarray(d["threshold_bin"], dtype=np.int64),
            child_left=np.asarray(d["child_left"], dtype=np.int64),
            child_right=np.asarray(d["child_right"], dtype=np.int64),
            leaf_value=np.asarray(d["leaf_value"], dtype=np.float64),
        )


class _LeafwiseGrower:
    """Grows one tree by always splitting the leaf with the best global gain."""

    def __init__(self, codes, g, h, max_bins, max_leaves, reg_lambda, min_samples_leaf,
                 feature_mask=None):
        self.codes = codes
        self.g = g
        self.h = h
        self.max_bins = max_bins
        self.max_leaves = max_leaves
        self.reg_lambda = reg_lambda
        self.min_samples_leaf = min_samples_leaf
        self.feature_mask = feature_mask
        self.feature: list[int] = []
        self.threshold_bin: list[int] = []
        self.child_left: list[int] = []
        self.child_right: list[int] = []
        self.leaf_value: list[float] = []
        self.node_samples: dict[int, np.ndarray] = {}

    def _new_node(self, samples: np.ndarray) -> int:
        node = len(self.feature)
        self.feature.append(-1)
        self.threshold_bin.append(-1)
        self.child_left.append(-1)
        self.child_right.append(-1)
        gsum = float(self.g[samples].sum())
        hsum = float(self.h[samples].sum())
        self.leaf_value.append(-gsum / (hsum + self.reg_lambda))
        self.node_samples[node] = samples
        return node

    def _best_split(self, node: int):
        """(gain, feature, threshold_bin) of the best valid split, or None."""
        samples = self.node_samples[node]
        if samples.size < 2 * self.min_samples_leaf:
            return None
        hist = accumulate_histograms(self.codes, samples, self.g, self.h, self.max_bins)
        g_tot = self.g[samples].sum()
        h_tot = self.h[samples].sum()
        n_tot = samples.size

        gl = np.cumsum(hist.g[:, :-1], axis=1)
        hl = np.cumsum(hist.h[:, :-1], axis=1)
        nl = np.cumsum(hist.count[:, :-1], axis=1)
        if gl.size == 0:
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gains = split_gain(gl, hl, g_tot - gl, h_tot - hl, self.reg_lambda)
        valid = (nl >= self.min_samples_leaf) & (n_tot - nl >= self.min_samples_leaf)
        if self.feature_mask is not None:
            valid = valid & self.feature_mask[:, None]
        gains = np.where(valid, gains, -np.inf)
        flat = int(np.argmax(gains))
        best_gain = float(gains.ravel()[flat])
        if not np.isfinite(best_gain) or best_gain <= 0.0:
            return None
        j, t = divmod(flat, gains.shape[1])
        return best_gain, int(j), int(t)

    def grow(self) -> BoostedTree:
        root = self._new_node(np.arange(self.g.size))
        n_leaves = 1
        frontier = {root: self._best_split(root)}
        while n_leaves < self.max_leaves:
            live = {k: v for k, v in frontier.items() if v is not None}
            if not live:
                break
            # deterministic arbitration: gain desc, then node id, feature, bin
            node = min(live, key=lambda k: (-live[k][0], k, live[k][1], live[k][2]))
            gain, j, t = live[node]
            samples = self.node_samples.pop(node)
            go_left = self.codes[samples, j] <= t
            left = self._new_node(samples[go_left])
            right = self._new_node(samples[~go_left])
            self.feature[node] = j
            self.threshold_bin[node] = t
            self.child_left[node] = left
            self.child_right[node] = right
            del frontier[node]
            frontier[left] = self._best_split(left)
            frontier[right] = self._best_split(right)
            n_leaves += 1
        return BoostedTree(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold_bin=np.asarray(self.threshold_bin, dtype=np.int64),
            child_left=np.asarray(self.child_left, dtype=np.int64),
            child_right=np.asarray(self.child_right, dtype=np.int64),
            leaf_value=np.asarray(self.leaf_value, dtype=np.float64),
        )


def grow_leafwise(
    codes: np.ndarray,
    g: np.ndarray,
    h: np.ndarray,
    max_bins: int,
    max_leaves: int,
    reg_lambda: float,
    min_samples_leaf: int = 2,
    feature_mask: np.ndarray | None = None,
) -> BoostedTree:
    """One leaf-wise tree for fixed gradients; returns a stump if nothing gains.

    feature_mask, when given, restricts candidate split features to the True
    entries (used by per-round feature subsampling).
    """
    if g.size < 2:
        raise ValueError("need at least 2 samples to grow")
    grower = _LeafwiseGrower(codes, g, h, max_bins, max_leaves, reg_lambda,
                             min_samples_leaf, feature_mask)
    return grower.grow()


def _logit(q: float) -> float:
    q = min(max(q, PROB_EPS), 1.0 - PROB_EPS)
    return float(np.log(q / (1.0 - q)))


@dataclass
class BoostedEnsemble:
    trees: list[BoostedTree]
    eta: float
    base_score: float
    reg_lambda: float
    max_leaves: int
    binning: BinnedFeatures = field(repr=False)
    train_loss: list[float] = field(default_factory=list)
    vocab_fingerprint: str | None = None

    def n_trees(self) -> int:
        return len(self.trees)

    def predict_raw_binned(self, codes: np.ndarray) -> np.ndarray:
        raw = np.full(codes.shape[0], self.base_score)
        for tree in self.trees:
            raw += self.eta * np.array([tree.predict_bins(codes[i]) for i in range(codes.shape[0])])
        return raw

    def to_dict(self) -> dict:
        if self.binning.kind != "binary":
            raise ValueError("only binary-bin ensembles serialize to the bundle format")
        return {
            "kind": "boosted_trees",
            "eta": self.eta,
            "base_score": self.base_score,
            "reg_lambda": self.reg_lambda,
            "max_leaves": self.max_leaves,
            "n_features": self.binning.n_features,
            "vocab_fingerprint": self.vocab_fingerprint,
            "train_loss": list(self.train_loss),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedEnsemble":
        p = int(d["n_features"])
        binning = BinnedFeatures(codes=np.zeros((0, p), dtype=np.int64),
                                 n_bins=np.full(p, 2), kind="binary")
        return cls(
            trees=[BoostedTree.from_dict(t) for t in d["trees"]],
            eta=float(d["eta"]),
            base_score=float(d["base_score"]),
            reg_lambda=float(d["reg_lambda"]),
            max_leaves=int(d["max_leaves"]),
            binning=binning,
            train_loss=[float(x) for x in d.get("train_loss", [])],
            vocab_fingerprint=d.get("vocab_fingerprint"),
        )


def fit_boosted(
    data_or_features,
    labels=None,
    n_rounds: int = 100,
    eta: float = 0.1,
    max_leaves: int = 31,
    reg_lambda: float = 1.0,
    min_samples_leaf: int = 2,
    max_bins: int = 256,
    subsample_rows: float = 1.0,
    subsample_features: float = 1.0,
    rng_plan: RngPlan | int = 0,
) -> BoostedEnsemble:
    """Fit a boosted ensemble on a LabeledDataset or (numeric array, labels).

    base_score is the log-odds of the positive rate; each round grows one
    leaf-wise tree on the current gradients and adds eta times its output to
    the raw scores. The per-round training log-loss trace is recorded on the
    returned ensemble.

    With the subsample fractions at their default 1.0 growth is fully
    deterministic and rng_plan is never consumed. Fractions below 1 draw a
    fresh row subset and/or feature mask per round from a (rng_plan, round)
    derived stream, so results stay reproducible at any worker count. Note the
    training-loss monotonicity guarantee applies only to the default
    full-sample path.
    """
    if isinstance(data_or_features, LabeledDataset):
        y = data_or_features.labels.astype(np.float64)
        binning = bin_features(data_or_features.features)
        fingerprint = data_or_features.vocab_fingerprint
    else:
        if labels is None:
            raise ValueError("labels required when passing a raw feature array")
        y = np.asarray(labels, dtype=np.float64)
        binning = bin_features(data_or_features, max_bins=max_bins)
        fingerprint = None
    if n_rounds < 1:
        raise ValueError("need at least one boosting round")
    if y.min() == y.max():
        raise ValueError("training data contains a single class")
    if not 0.0 < eta <= 1.0:
        raise ValueError("eta must be in (0, 1]")
    for name, frac in (("subsample_rows", subsample_rows),
                       ("subsample_features", subsample_features)):
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"{name} must be in (0, 1]")
    plan = rng_plan if isinstance(rng_plan, RngPlan) else RngPlan(int(rng_plan))

    codes = binning.codes
    n, p_features = codes.shape
    bins_cap = int(binning.n_bins.max())
    base = _logit(float(y.mean()))
    raw = np.full(y.size, base)
    trees: list[BoostedTree] = []
    trace: list[float] = []
    for t in range(n_rounds):
        p = sigmoid(raw)
        g, h = grad_hess(p, y)
        round_codes, round_g, round_h = codes, g, h
        feature_mask = None
        if subsample_rows < 1.0 or subsample_features < 1.0:
            rng = plan.generator("boost-round", t)
            if subsample_rows < 1.0:
                keep = max(2, int(np.ceil(subsample_rows * n)))
                rows = np.sort(rng.choice(n, size=keep, replace=False))
                round_codes, round_g, round_h = codes[rows], g[rows], h[rows]
            if subsample_features < 1.0:
                keep = max(1, int(np.ceil(subsample_features * p_features)))
                chosen = rng.choice(p_features, size=keep, replace=False)
                feature_mask = np.zeros(p_features, dtype=bool)
                feature_mask[chosen] = True
        tree = grow_leafwise(round_codes, round_g, round_h, bins_cap, max_leaves,
                             reg_lambda, min_samples_leaf, feature_mask)
        contrib = np.array([tree.predict_bins(codes[i]) for i in range(codes.shape[0])])
        raw = raw + eta * contrib
        trees.append(tree)
        trace.append(logloss(y, sigmoid(raw)))

    return BoostedEnsemble(
        trees=trees,
        eta=eta,
        base_score=base,
        reg_lambda=reg_lambda,
        max_leaves=max_leaves,
        binning=binning,
        train_loss=trace,
        vocab_fingerprint=fingerprint,
    )


def predict_raw(ens: BoostedEnsemble, features) -> np.ndarray:
    """Raw scores base + eta * sum of tree outputs for a matrix of rows."""
    if isinstance(features, SparseBinaryMatrix):
        if ens.binning.kind != "binary":
            raise ValueError("ensemble was trained on numeric bins")
        if features.n_cols != ens.binning.n_features:
            raise ValueError("feature count mismatch")
        codes = features.to_dense(dtype=np.int64)
    else:
        dense = np.asarray(features, dtype=np.float64)
        codes = np.vstack([ens.binning.bin_row(dense[i]) for i in range(dense.shape[0])])
    return ens.predict_raw_binned(codes)


def predict_proba(ens: BoostedEnsemble, features) -> np.ndarray:
    """Sigmoid of the raw scores."""
    return sigmoid(predict_raw(ens, features))
