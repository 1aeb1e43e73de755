"""Out-of-fold meta-feature construction and the ridge-logistic meta-learner.

For each fold k and each base learner, a model trains on every other fold and
scores fold k, so each training sample's meta-row comes from models that never
saw it. The meta-learner is a logistic regression maximizing

    l(beta) - lambda * sum_j beta_j^2        (intercept unpenalized)

solved by full-batch Newton with step halving; with three meta features the
Hessian is 4x4, so convergence to a 1e-8 gradient sup-norm is cheap.
"""

from __future__ import annotations

import concurrent.futures
from dataclasses import dataclass, field

import numpy as np

from .boosting import sigmoid
from .rng import RngPlan
from .sparse import LabeledDataset

META_GRAD_TOL = 1e-8
META_MAX_ITER = 1000
# sigmoid argument clip keeping outputs strictly inside (0, 1) in float64
_Z_CLIP = 36.0


@dataclass(frozen=True)
class MetaFeatureMatrix:
    """N x 3 out-of-fold probability matrix with aligned labels."""

    features: np.ndarray
    labels: np.ndarray
    sample_ids: tuple
    column_names: tuple

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int8)
        if features.ndim != 2 or features.shape[1] != len(self.column_names):
            raise ValueError("feature matrix must have one column per base model")
        if features.shape[0] != labels.size or labels.size != len(self.sample_ids):
            raise ValueError("row/label/id count mismatch")
        if features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise ValueError("meta features must be probabilities in [0, 1]")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return self.labels.size

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("sample_id," + ",".join(self.column_names) + ",label\n")
            for i, sid in enumerate(self.sample_ids):
                cols = ",".join(repr(float(v)) for v in self.features[i])
                fh.write(f"{sid},{cols},{int(self.labels[i])}\n")


def _oof_job(learner, data, fold_assignments, fold, seed):
    train_rows = np.flatnonzero(fold_assignments != fold)
    score_rows = np.flatnonzero(fold_assignments == fold)
    model = learner.fit(data.subset(train_rows), seed)
    probs = learner.predict(model, data.features.select_rows(score_rows))
    return score_rows, np.asarray(probs, dtype=np.float64), model


def build_oof_matrix(
    train: LabeledDataset,
    fold_assignments,
    learners,
    rng_plan: RngPlan,
    workers: int = 1,
    return_models: bool = False,
):
    """Train learners per fold and assemble out-of-fold probabilities.

    Args:
        train: the balanced training set.
        fold_assignments: per-sample fold ids from the stratified splitter.
        learners: ordered learner specs; their keys name the meta columns.
        rng_plan: seeds derive from (learner key, fold), so results are
            identical at any worker count.
        workers: thread budget for the len(learners) * n_folds jobs.
        return_models: when True, also return {(key, fold): fitted model} so
            callers can average per-fold predictions instead of refitting.

    Every fold must contain both classes (the stratified splitter guarantees
    this upstream); a single-class fold is rejected here as a safety net.
    """
    fold_assignments = np.asarray(fold_assignments, dtype=np.int64)
    if fold_assignments.size != train.n_samples:
        raise ValueError("fold assignments must cover the training set")
    folds = np.unique(fold_assignments)
    y = train.labels
    for k in folds:
        if np.unique(y[fold_assignments == k]).size < 2:
            raise ValueError(f"fold {k} contains a single class")

    jobs = {}
    for learner in learners:
        for k in folds:
            jobs[(learner.key, int(k))] = (learner, int(k),
                                           rng_plan.child_seed(f"oof-{learner.key}", int(k)))

    results = {}
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(_oof_job, learner, train, fold_assignments, k, seed): key
                for key, (learner, k, seed) in jobs.items()
            }
            for fut in concurrent.futures.as_completed(futures):
                results[futures[fut]] = fut.result()
    else:
        for key, (learner, k, seed) in jobs.items():
            results[key] = _oof_job(learner, train, fold_assignments, k, seed)

    matrix = np.full((train.n_samples, len(learners)), np.nan)
    fold_models = {}
    for col, learner in enumerate(learners):
        for k in folds:
            rows, probs, model = results[(learner.key, int(k))]
            matrix[rows, col] = probs
            fold_models[(learner.key, int(k))] = model
    meta = MetaFeatureMatrix(
        features=matrix,
        labels=y,
        sample_ids=train.sample_ids,
        column_names=tuple(f"p_{learner.key}" for learner in learners),
    )
    return (meta, fold_models) if return_models else meta


@dataclass(frozen=True)
class LogisticModel:
    """Fitted meta-learner: sigma(intercept + coefficients . meta features)."""

    intercept: float
    coefficients: np.ndarray
    reg_lambda: float
    converged: bool = True
    grad_norm: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        coefs = np.asarray(self.coefficients, dtype=np.float64)
        if not (np.isfinite(self.intercept) and np.isfinite(coefs).all()):
            raise ValueError("coefficients must be finite")
        if self.reg_lambda < 0:
            raise ValueError("reg_lambda must be non-negative")
        object.__setattr__(self, "coefficients", coefs)

    def to_dict(self) -> dict:
        return {
            "intercept": self.intercept,
            "coefficients": self.coefficients.tolist(),
            "reg_lambda": self.reg_lambda,
            "converged": self.converged,
            "grad_norm": self.grad_norm,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LogisticModel":
        return cls(
            intercept=float(d["intercept"]),
            coefficients=np.asarray(d["coefficients"], dtype=np.float64),
            reg_lambda=float(d["reg_lambda"]),
            converged=bool(d.get("converged", True)),
            grad_norm=float(d.get("grad_norm", 0.0)),
            n_iter=int(d.get("n_iter", 0)),
        )


def penalized_loglik(beta: np.ndarray, x_aug: np.ndarray, y: np.ndarray, lam: float) -> float:
    """l(beta) - lam * sum of squared non-intercept coefficients."""
    z = np.clip(x_aug @ beta, -_Z_CLIP, _Z_CLIP)
    p = sigmoid(z)
    ll = float(np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    return ll - lam * float(np.sum(beta[1:] ** 2))


def _loglik_grad(beta, x_aug, y, lam):
    z = np.clip(x_aug @ beta, -_Z_CLIP, _Z_CLIP)
    p = sigmoid(z)
    grad = x_aug.T @ (y - p)
    grad[1:] -= 2.0 * lam * beta[1:]
    return grad, p


def fit_logistic_array(x: np.ndarray, y, reg_lambda: float = 1.0) -> LogisticModel:
    """Newton-with-step-halving fit of the penalized logistic objective.

    Starts from beta = 0, iterates full Newton steps (halved until the
    penalized log-likelihood does not decrease), and stops when the gradient
    sup-norm is <= 1e-8. Hitting the 1000-iteration cap returns the model
    flagged unconverged with the achieved gradient norm.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if np.unique(y).size < 2:
        raise ValueError("both labels must be present")
    n, d = x.shape
    x_aug = np.column_stack([np.ones(n), x])
    beta = np.zeros(d + 1)
    penalty_diag = np.r_[0.0, np.full(d, 2.0 * reg_lambda)]

    obj = penalized_loglik(beta, x_aug, y, reg_lambda)
    grad, p = _loglik_grad(beta, x_aug, y, reg_lambda)
    it = 0
    while np.abs(grad).max() > META_GRAD_TOL and it < META_MAX_ITER:
        it += 1
        w = p * (1.0 - p)
        hess = x_aug.T @ (x_aug * w[:, None]) + np.diag(penalty_diag)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = grad  # fall back to a gradient step if curvature degenerates
        scale = 1.0
        for _ in range(50):
            cand = beta + scale * step
            cand_obj = penalized_loglik(cand, x_aug, y, reg_lambda)
            if cand_obj >= obj or scale < 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
        obj = penalized_loglik(beta, x_aug, y, reg_lambda)
        grad, p = _loglik_grad(beta, x_aug, y, reg_lambda)

    grad_norm = float(np.abs(grad).max())
    return LogisticModel(
        intercept=float(beta[0]),
        coefficients=beta[1:],
        reg_lambda=reg_lambda,
        converged=grad_norm <= META_GRAD_TOL,
        grad_norm=grad_norm,
        n_iter=it,
    )


def fit_logistic(meta: MetaFeatureMatrix, reg_lambda: float = 1.0) -> LogisticModel:
    """Fit the meta-learner on an out-of-fold probability matrix."""
    return fit_logistic_array(meta.features, meta.labels, reg_lambda)


def predict_meta(model: LogisticModel, meta_features) -> np.ndarray:
    """sigma(b0 + b . p) for rows of base-model probabilities; always in (0,1)."""
    x = np.atleast_2d(np.asarray(meta_features, dtype=np.float64))
    z = np.clip(model.intercept + x @ model.coefficients, -_Z_CLIP, _Z_CLIP)
    out = sigmoid(z)
    return out if out.size > 1 else float(out[0])


@dataclass
class StackedEnsemble:
    """Base models refit on the full training set plus the fitted meta-learner."""

    base_models: dict
    meta: LogisticModel
    learner_keys: tuple
    vocab_fingerprint: str | None = None
    refit_seeds: dict = field(default_factory=dict)


def refit_base_models(
    train: LabeledDataset,
    learners,
    rng_plan: RngPlan,
    workers: int = 1,
) -> tuple[dict, dict]:
    """Retrain each learner on the full training set; returns (models, seeds)."""
    seeds = {learner.key: rng_plan.child_seed(f"refit-{learner.key}") for learner in learners}
    models = {}
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(learner.fit, train, seeds[learner.key]): learner.key
                for learner in learners
            }
            for fut in concurrent.futures.as_completed(futures):
                models[futures[fut]] = fut.result()
    else:
        for learner in learners:
            models[learner.key] = learner.fit(train, seeds[learner.key])
    return models, seeds


def refit_and_predict(
    train: LabeledDataset,
    test: LabeledDataset,
    learners,
    meta_model: LogisticModel,
    rng_plan: RngPlan,
    workers: int = 1,
    fold_models: dict | None = None,
) -> tuple[np.ndarray, dict]:
    """Score a test set with the stacked ensemble.

    By default each base learner is refit on the full training set. Passing
    ``fold_models`` (mapping (key, fold) -> fitted model) instead averages the
    per-fold models' predictions, for experiments that skip the refit.

    Returns (meta probabilities, per-learner probability dict). Train and test
    must share a vocabulary fingerprint when both carry one.
    """
    if (train.vocab_fingerprint and test.vocab_fingerprint
            and train.vocab_fingerprint != test.vocab_fingerprint):
        raise ValueError(
            f"vocabulary fingerprint mismatch: train {train.vocab_fingerprint}, "
            f"test {test.vocab_fingerprint}"
        )
    base_probs = {}
    if fold_models is None:
        models, _ = refit_base_models(train, learners, rng_plan, workers)
        for learner in learners:
            base_probs[learner.key] = learner.predict(models[learner.key], test.features)
    else:
        folds = sorted({fold for _, fold in fold_models})
        for learner in learners:
            per_fold = [learner.predict(fold_models[(learner.key, k)], test.features)
                        for k in folds]
            base_probs[learner.key] = np.mean(per_fold, axis=0)

    if test.n_samples == 0:
        return np.array([]), base_probs
    stacked = np.column_stack([base_probs[learner.key] for learner in learners])
    meta_probs = np.atleast_1d(predict_meta(meta_model, stacked))
    return meta_probs, base_probs
