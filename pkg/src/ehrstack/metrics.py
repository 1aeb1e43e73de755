"""ROC/AUC, confusion-derived metrics, and seeded bootstrap confidence intervals.

Conventions fixed here and used everywhere else:
  * a score equal to the threshold counts as a positive prediction;
  * AUC is the trapezoidal area under the tie-grouped ROC curve, which equals
    the Mann-Whitney pair statistic with ties counted 1/2;
  * 0/0 metrics are reported as undefined (None), never silently as 0 or 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("auc", "sensitivity", "specificity", "ppv", "npv", "f1", "accuracy")


def _check_scores(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise ValueError("labels and scores must be 1-d and the same length")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return labels.astype(np.int8), scores


@dataclass(frozen=True)
class RocCurve:
    """Tie-grouped ROC curve from (0,0) to (1,1).

    One point per distinct score, thresholds descending; the leading (0,0)
    point carries threshold +inf.
    """

    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("fpr,tpr,threshold\n")
            for f, t, th in zip(self.fpr, self.tpr, self.thresholds):
                fh.write(f"{f!r},{t!r},{th!r}\n")


def roc_points(labels, scores) -> RocCurve:
    """ROC curve with one step per distinct score (ties grouped).

    Raises ValueError when only one class is present (the curve, and AUC,
    would be undefined).
    """
    labels, scores = _check_scores(labels, scores)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC requires both classes present")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # last index of each distinct-score group
    distinct = np.flatnonzero(np.diff(sorted_scores) != 0)
    group_ends = np.r_[distinct, len(sorted_scores) - 1]

    tp_cum = np.cumsum(sorted_labels == 1)[group_ends]
    fp_cum = np.cumsum(sorted_labels == 0)[group_ends]
    fpr = np.r_[0.0, fp_cum / n_neg]
    tpr = np.r_[0.0, tp_cum / n_pos]
    thresholds = np.r_[np.inf, sorted_scores[group_ends]]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds)


def auc(labels, scores) -> float:
    """Trapezoidal area under the ROC curve."""
    curve = roc_points(labels, scores)
    widths = np.diff(curve.fpr)
    heights = (curve.tpr[1:] + curve.tpr[:-1]) / 2.0
    return float(np.dot(widths, heights))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion_at(labels, scores, threshold: float = 0.5) -> ConfusionCounts:
    """Confusion counts predicting positive iff score >= threshold."""
    labels, scores = _check_scores(labels, scores)
    pred = scores >= threshold
    pos = labels == 1
    return ConfusionCounts(
        tp=int((pred & pos).sum()),
        fp=int((pred & ~pos).sum()),
        tn=int((~pred & ~pos).sum()),
        fn=int((~pred & pos).sum()),
    )


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def compute_metrics(c: ConfusionCounts) -> dict:
    """Sensitivity, specificity, PPV, NPV, F1 and accuracy from counts.

    Any 0/0 ratio comes back as None so degenerate test sets cannot silently
    inflate a report.
    """
    if c.total == 0:
        raise ValueError("empty confusion counts")
    sens = _ratio(c.tp, c.tp + c.fn)
    spec = _ratio(c.tn, c.tn + c.fp)
    ppv = _ratio(c.tp, c.tp + c.fp)
    npv = _ratio(c.tn, c.tn + c.fn)
    if ppv is None or sens is None or (ppv + sens) == 0:
        f1 = None
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    return {
        "sensitivity": sens,
        "specificity": spec,
        "ppv": ppv,
        "npv": npv,
        "f1": f1,
        "accuracy": (c.tp + c.tn) / c.total,
    }


def metric_value(name: str, labels, scores, threshold: float = 0.5) -> float | None:
    """Point estimate of one named metric on a labeled score set."""
    if name == "auc":
        return auc(labels, scores)
    if name not in METRIC_NAMES:
        raise ValueError(f"unknown metric {name!r}")
    return compute_metrics(confusion_at(labels, scores, threshold))[name]


def bootstrap_ci(
    labels,
    scores,
    metric: str,
    rng: np.random.Generator,
    n_resamples: int = 1000,
    level: float = 0.95,
    threshold: float = 0.5,
) -> tuple[float, float]:
    """Stratified percentile bootstrap interval for one metric.

    Resamples positives and negatives separately (with replacement), so class
    counts are preserved. Resamples on which the metric is undefined are
    redrawn; total draws are capped at 10x the requested resample count, and
    exceeding the cap raises with diagnostics.
    """
    labels, scores = _check_scores(labels, scores)
    if labels.size < 2:
        raise ValueError("bootstrap needs at least 2 samples")
    pos_scores = scores[labels == 1]
    neg_scores = scores[labels == 0]
    if pos_scores.size == 0 or neg_scores.size == 0:
        raise ValueError("bootstrap requires both classes present")

    resample_labels = np.r_[np.ones(pos_scores.size, dtype=np.int8), np.zeros(neg_scores.size, dtype=np.int8)]
    values = np.empty(n_resamples)
    kept = 0
    attempts = 0
    cap = 10 * n_resamples
    while kept < n_resamples:
        if attempts >= cap:
            raise RuntimeError(
                f"bootstrap_ci: exceeded {cap} draws with only {kept} usable "
                f"resamples for metric {metric!r} (n={labels.size})"
            )
        attempts += 1
        sample = np.r_[
            pos_scores[rng.integers(0, pos_scores.size, pos_scores.size)],
            neg_scores[rng.integers(0, neg_scores.size, neg_scores.size)],
        ]
        v = metric_value(metric, resample_labels, sample, threshold)
        if v is None or math.isnan(v):
            continue
        values[kept] = v
        kept += 1

    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(values, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass(frozen=True)
class MetricReport:
    """Seven metrics, each as (point estimate, CI lower, CI upper).

    Undefined metrics carry None for all three slots. The percentile interval
    is widened, when necessary, to include the point estimate so that
    lower <= point <= upper holds by construction.
    """

    metrics: dict

    def __post_init__(self):
        for name in METRIC_NAMES:
            if name not in self.metrics:
                raise ValueError(f"missing metric {name!r}")
            point, lo, hi = self.metrics[name]
            if point is not None and not (lo <= point <= hi):
                raise ValueError(f"{name}: interval [{lo}, {hi}] excludes point {point}")

    def __getitem__(self, name: str):
        return self.metrics[name]

    def to_dict(self) -> dict:
        return {
            name: {"point": p, "ci_lower": lo, "ci_upper": hi}
            for name, (p, lo, hi) in sorted(self.metrics.items())
        }


def metric_report(
    labels,
    scores,
    rng: np.random.Generator,
    n_resamples: int = 1000,
    level: float = 0.95,
    threshold: float = 0.5,
) -> MetricReport:
    """MetricReport for all seven metrics with bootstrap CIs."""
    out = {}
    for name in METRIC_NAMES:
        point = metric_value(name, labels, scores, threshold)
        if point is None:
            out[name] = (None, None, None)
            continue
        lo, hi = bootstrap_ci(labels, scores, name, rng, n_resamples, level, threshold)
        out[name] = (point, min(lo, point), max(hi, point))
    return MetricReport(out)
