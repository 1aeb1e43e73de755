"""Stack the three base learners into the logistic meta-learner.

Builds the out-of-fold meta-feature matrix, fits the ridge-penalized logistic
combination, and compares the stack against its base models on both the
regular and the risk-enriched testing set.
"""

import numpy as np

from ehrstack import metrics
from ehrstack.forest import gini_importance
from ehrstack.ingest import build_cohorts, build_vocabulary, encode_features
from ehrstack.learners import BoostedLearner, ForestLearner, NeuralNetLearner
from ehrstack.rng import RngPlan
from ehrstack.sampling import (build_testing_set_hard, build_testing_set_regular,
                               reserve_holdout, stratified_kfold,
                               undersample_balanced)
from ehrstack.stacking import (build_oof_matrix, fit_logistic, predict_meta,
                               refit_base_models)
from ehrstack.synthetic import SyntheticSpec, generate_cohort

spec = SyntheticSpec(n_patients=4000, exact_cases=70, vocab_size=250, seed=24)
tables = generate_cohort(spec)
cohorts = build_cohorts(tables)
vocab = build_vocabulary(tables, cohorts)
dataset = encode_features(tables, cohorts, vocab)

plan = RngPlan(2024)
cases = np.flatnonzero(dataset.labels == 1)
controls = np.flatnonzero(dataset.labels == 0)
test_cases, train_cases = reserve_holdout(cases, 34, plan.generator("holdout"))
train_idx = undersample_balanced(train_cases, controls, plan.generator("undersample"))
train = dataset.subset(train_idx)
folds = stratified_kfold(train.labels, 5, plan.generator("folds"))
print(f"training on {train.n_samples} balanced samples; {test_cases.size} held-out cases")

learners = (ForestLearner(), BoostedLearner(), NeuralNetLearner(epochs=60))
oof = build_oof_matrix(train, folds, learners, plan.child("oof"), workers=4)
print("\nout-of-fold AUC per base model:")
for col, name in enumerate(oof.column_names):
    print(f"  {name:<7} {metrics.auc(oof.labels, oof.features[:, col]):.4f}")

meta = fit_logistic(oof, reg_lambda=1.0)
print(f"\nmeta-learner (lambda=1.0, converged={meta.converged}, "
      f"{meta.n_iter} Newton steps):")
print(f"  intercept {meta.intercept:+.3f}")
for name, coef in zip(oof.column_names, meta.coefficients):
    print(f"  {name:<7} {coef:+.3f}")

# refit the bases on the full training set, then build both testing sets
models, _ = refit_base_models(train, learners, plan.child("refit"), workers=4)
importance = gini_importance(models["rf"])
top100 = np.argsort(-importance, kind="stable")[:100]

pool = np.setdiff1d(controls, train_idx)
test1, _ = build_testing_set_regular(dataset, test_cases, pool,
                                     plan.generator("test1"), train_indices=train_idx)
test2, _ = build_testing_set_hard(dataset, test_cases, pool, top100,
                                  plan.generator("test2"), train_indices=train_idx)

for label, test in (("regular testing set", test1), ("risk-enriched testing set", test2)):
    base_probs = {l.key: l.predict(models[l.key], test.features) for l in learners}
    stacked = np.column_stack([base_probs[l.key] for l in learners])
    meta_probs = np.atleast_1d(predict_meta(meta, stacked))
    print(f"\n{label} ({test.n_samples} samples):")
    for key, probs in base_probs.items():
        print(f"  {key:<5} AUC {metrics.auc(test.labels, probs):.4f}")
    report = metrics.compute_metrics(metrics.confusion_at(test.labels, meta_probs))
    print(f"  meta  AUC {metrics.auc(test.labels, meta_probs):.4f}  "
          f"sensitivity {report['sensitivity']:.3f}  specificity {report['specificity']:.3f}")
