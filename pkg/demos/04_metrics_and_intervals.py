"""Tour of the evaluation toolkit: ROC curves, AUC, and bootstrap intervals.

Demonstrates the ties-count-half AUC convention, the 0.5-threshold confusion
metrics with explicit undefined values, and seeded percentile-bootstrap
confidence intervals.
"""

import numpy as np

from ehrstack.metrics import (auc, bootstrap_ci, compute_metrics, confusion_at,
                              metric_report, roc_points)

rng = np.random.default_rng(3)
labels = np.r_[np.ones(40, dtype=int), np.zeros(40, dtype=int)]
scores = np.clip(labels * 0.35 + rng.random(80) * 0.65, 0, 1)

curve = roc_points(labels, scores)
print(f"ROC curve: {curve.fpr.size} points from (0,0) to (1,1)")
print(f"AUC (trapezoid over tie-grouped steps): {auc(labels, scores):.4f}")

# ties count one half: a constant score gives exactly 0.5
print(f"all-tied AUC: {auc(labels, np.full(80, 0.5)):.2f}")

counts = confusion_at(labels, scores, threshold=0.5)
print(f"\nconfusion at 0.5 (score == threshold counts positive): "
      f"TP={counts.tp} FP={counts.fp} TN={counts.tn} FN={counts.fn}")
derived = compute_metrics(counts)
for name, value in derived.items():
    print(f"  {name:<12} {value:.4f}")

# degenerate sets surface as None, never as silent zeros
nothing_predicted = confusion_at([1, 1, 0], [0.1, 0.2, 0.3], threshold=0.9)
print(f"\nwith no positive predictions, PPV is "
      f"{compute_metrics(nothing_predicted)['ppv']!r} (undefined, not 0)")

lo, hi = bootstrap_ci(labels, scores, "auc", np.random.default_rng(11), n_resamples=1000)
print(f"\n95% bootstrap interval for AUC: [{lo:.4f}, {hi:.4f}] "
      "(stratified resamples, seeded, reproducible)")

report = metric_report(labels, scores, np.random.default_rng(11), n_resamples=1000)
print("\nfull report (point estimate and 95% CI):")
for name, (point, lower, upper) in sorted(report.metrics.items()):
    print(f"  {name:<12} {point:.4f}  [{lower:.4f}, {upper:.4f}]")
