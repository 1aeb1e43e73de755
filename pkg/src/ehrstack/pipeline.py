"""End-to-end orchestration: ingest -> split -> train -> stack -> evaluate.

A run is fully described by its config; the run directory is named by the
config hash (no timestamps) and two runs with the same config and seed produce
byte-identical outputs at any worker count. BLAS pools are pinned to one
thread for the duration of a run so the only concurrency is the explicit job
scheduler, whose per-job seeds make scheduling order irrelevant.

Run directory contents:
    manifest.json        config, config hash, input fingerprints
    ingest_report.json   drop/dedup/skip counters
    dataset.json         encoded dataset + vocabulary
    split_manifest.json  seed, train/fold/test index lists, top features
    cv_metrics.json      per-base-model CV reports (pooled OOF + per fold)
    oof_matrix.csv       out-of-fold meta-feature matrix
    ensemble.json        serialized base models + meta-learner
    metrics_test1.json   meta model report on the regular test set
    metrics_test2.json   meta model report on the risk-enriched test set
    importance.csv       full feature-importance ranking
    roc_*.csv            ROC curves (per-base CV, meta on both test sets)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import forest as forest_mod
from . import ingest as ingest_mod
from . import metrics as metrics_mod
from . import sampling, stacking, synthetic
from .bundle import EnsembleBundle, load_bundle, save_bundle
from .learners import BoostedLearner, ForestLearner, NeuralNetLearner, predict_with
from .rng import RngPlan
from .sparse import FeatureVocabulary, LabeledDataset


class PipelineError(RuntimeError):
    """A module failure with the pipeline stage attached."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    root_seed: int = 42
    out_dir: str = "runs"
    workers: int = 1
    holdout_k: int = 34
    n_folds: int = 5
    top_n_risk: int = 100
    meta_lambda: float = 1.0
    bootstrap_samples: int = 1000
    include_procedures: bool = False
    reuse_fold_models: bool = False
    inputs: dict | None = None
    synthetic_spec: synthetic.SyntheticSpec | None = None
    rf: ForestLearner = field(default_factory=ForestLearner)
    lgbm: BoostedLearner = field(default_factory=BoostedLearner)
    dnn: NeuralNetLearner = field(default_factory=NeuralNetLearner)

    def validate(self) -> None:
        if self.holdout_k < 1:
            raise ValueError("holdout_k must be >= 1")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")
        if self.top_n_risk < 2:
            raise ValueError("top_n_risk must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if (self.inputs is None) == (self.synthetic_spec is None):
            raise ValueError("config needs exactly one of input paths or a synthetic spec")
        if self.inputs is not None:
            missing = {"patients", "admissions", "diagnoses", "procedures"} - set(self.inputs)
            if missing:
                raise ValueError(f"inputs missing tables: {sorted(missing)}")

    def learners(self) -> tuple:
        return (self.rf, self.lgbm, self.dnn)

    def to_dict(self) -> dict:
        return {
            "root_seed": self.root_seed,
            "holdout_k": self.holdout_k,
            "n_folds": self.n_folds,
            "top_n_risk": self.top_n_risk,
            "meta_lambda": self.meta_lambda,
            "bootstrap_samples": self.bootstrap_samples,
            "include_procedures": self.include_procedures,
            "reuse_fold_models": self.reuse_fold_models,
            "inputs": dict(self.inputs) if self.inputs else None,
            "synthetic": self.synthetic_spec.to_dict() if self.synthetic_spec else None,
            "rf": self.rf.config(),
            "lgbm": self.lgbm.config(),
            "dnn": self.dnn.config(),
        }

    def config_hash(self) -> str:
        # out_dir and workers are excluded: neither affects any output byte
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _report_to_dict(report: metrics_mod.MetricReport) -> dict:
    return report.to_dict()


def _point_metrics(labels, scores) -> dict:
    out = {name: metrics_mod.metric_value(name, labels, scores)
           for name in metrics_mod.METRIC_NAMES}
    return out


@dataclass
class TrainResult:
    train_indices: np.ndarray
    fold_assignments: np.ndarray
    test_case_indices: np.ndarray
    test1_control_indices: np.ndarray
    test2_control_indices: np.ndarray
    top_features: np.ndarray
    oof: stacking.MetaFeatureMatrix
    meta: stacking.LogisticModel
    models: dict
    refit_seeds: dict
    fold_models: dict | None
    importance: np.ndarray


@dataclass
class RunResult:
    run_dir: Path
    config_hash: str
    test1_report: metrics_mod.MetricReport
    test2_report: metrics_mod.MetricReport
    test1_base_auc: dict
    test2_base_auc: dict
    cv_reports: dict
    importance: np.ndarray
    vocab: FeatureVocabulary
    train: TrainResult


def _obtain_tables(config: PipelineConfig):
    if config.synthetic_spec is not None:
        tables = synthetic.generate_cohort(config.synthetic_spec)
        input_fingerprints = {"synthetic_spec": config.synthetic_spec.to_dict()}
        return tables, input_fingerprints
    paths = config.inputs
    tables = ingest_mod.load_tables(
        paths["patients"], paths["admissions"], paths["diagnoses"], paths["procedures"])
    input_fingerprints = {
        name: hashlib.sha256(Path(p).read_bytes()).hexdigest()
        for name, p in sorted(paths.items())
    }
    return tables, input_fingerprints


def _split_and_train(config: PipelineConfig, dataset: LabeledDataset,
                     plan: RngPlan) -> TrainResult:
    labels = dataset.labels
    cases = np.flatnonzero(labels == 1)
    controls = np.flatnonzero(labels == 0)
    if cases.size == 0:
        raise ValueError("dataset contains no cases")

    test_cases, train_cases = sampling.reserve_holdout(
        cases, config.holdout_k, plan.generator("holdout"))
    train_idx = sampling.undersample_balanced(
        train_cases, controls, plan.generator("undersample"))
    fold_assignments = sampling.stratified_kfold(
        labels[train_idx], config.n_folds, plan.generator("folds"))

    train_data = dataset.subset(train_idx)
    learners = config.learners()
    oof = stacking.build_oof_matrix(
        train_data, fold_assignments, learners, plan.child("oof"),
        workers=config.workers,
        return_models=config.reuse_fold_models,
    )
    fold_models = None
    if config.reuse_fold_models:
        oof, fold_models = oof

    meta = stacking.fit_logistic(oof, config.meta_lambda)
    models, refit_seeds = stacking.refit_base_models(
        train_data, learners, plan.child("refit"), workers=config.workers)

    importance = forest_mod.gini_importance(models["rf"])
    effective_top = min(config.top_n_risk, importance.size)
    ranking = np.argsort(-importance, kind="stable")
    top_features = ranking[:effective_top]

    pool = np.setdiff1d(controls, train_idx)
    _, test1_idx = sampling.build_testing_set_regular(
        dataset, test_cases, pool, plan.generator("test1"), train_indices=train_idx)
    _, test2_idx = sampling.build_testing_set_hard(
        dataset, test_cases, pool, top_features, plan.generator("test2"),
        train_indices=train_idx)

    return TrainResult(
        train_indices=train_idx,
        fold_assignments=fold_assignments,
        test_case_indices=test_cases,
        test1_control_indices=test1_idx[test_cases.size:],
        test2_control_indices=test2_idx[test_cases.size:],
        top_features=top_features,
        oof=oof,
        meta=meta,
        models=models,
        refit_seeds=refit_seeds,
        fold_models=fold_models,
        importance=importance,
    )


def _cv_reports(config: PipelineConfig, train: TrainResult, plan: RngPlan) -> dict:
    """Pooled-OOF metric reports plus per-fold point metrics per base model."""
    out = {}
    labels = train.oof.labels
    for col, learner in enumerate(config.learners()):
        scores = train.oof.features[:, col]
        report = metrics_mod.metric_report(
            labels, scores, plan.generator(f"ci-cv-{learner.key}"),
            n_resamples=config.bootstrap_samples)
        per_fold = []
        for k in range(config.n_folds):
            rows = train.fold_assignments == k
            per_fold.append(_point_metrics(labels[rows], scores[rows]))
        fold_mean = {}
        for name in metrics_mod.METRIC_NAMES:
            defined = [f[name] for f in per_fold if f[name] is not None]
            fold_mean[name] = float(np.mean(defined)) if defined else None
        out[learner.key] = {
            "pooled_oof": report.to_dict(),
            "per_fold": per_fold,
            "fold_mean": fold_mean,
        }
    return out


def _score_test_set(config: PipelineConfig, dataset: LabeledDataset,
                    train: TrainResult, control_indices: np.ndarray):
    idx = np.r_[train.test_case_indices, control_indices]
    test_data = dataset.subset(idx)
    learners = config.learners()
    if train.fold_models is not None:
        folds = sorted({fold for _, fold in train.fold_models})
        base_probs = {
            learner.key: np.mean(
                [predict_with(learner.key, train.fold_models[(learner.key, k)],
                              test_data.features) for k in folds], axis=0)
            for learner in learners
        }
    else:
        base_probs = {
            learner.key: predict_with(learner.key, train.models[learner.key],
                                      test_data.features)
            for learner in learners
        }
    stacked = np.column_stack([base_probs[learner.key] for learner in learners])
    meta_probs = np.atleast_1d(stacking.predict_meta(train.meta, stacked))
    return test_data, meta_probs, base_probs


def _importance_csv(path, importance: np.ndarray, vocab) -> None:
    order = np.argsort(-importance, kind="stable")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("rank,feature,importance\n")
        for rank, j in enumerate(order, start=1):
            fh.write(f"{rank},{vocab.entries[int(j)]},{float(importance[j])!r}\n")


def run_pipeline(config: PipelineConfig) -> RunResult:
    """Execute the full workflow and write every artifact into the run directory.

    Raises PipelineError with the failing stage attached; validation problems
    surface as ValueError before any work starts.
    """
    config.validate()
    run_dir = Path(config.out_dir) / f"run-{config.config_hash()[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)

    # single-threaded BLAS keeps float results identical at any worker count
    with threadpool_limits(limits=1):
        return _run_pipeline_inner(config, run_dir)


def _run_pipeline_inner(config: PipelineConfig, run_dir: Path) -> RunResult:
    plan = RngPlan(config.root_seed)

    try:
        tables, input_fingerprints = _obtain_tables(config)
        cohorts = ingest_mod.build_cohorts(tables)
        vocab = ingest_mod.build_vocabulary(tables, cohorts, config.include_procedures)
        dataset = ingest_mod.encode_features(tables, cohorts, vocab,
                                             config.include_procedures)
    except Exception as err:
        raise PipelineError("ingest", err) from err

    write_json(run_dir / "manifest.json", {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "inputs": input_fingerprints,
        "n_cases": int(dataset.labels.sum()),
        "n_controls": int((dataset.labels == 0).sum()),
        "n_features": dataset.n_features,
        "vocab_fingerprint": vocab.fingerprint(),
    })
    write_json(run_dir / "ingest_report.json", tables.report.to_dict())
    ingest_mod.save_dataset(dataset, vocab, run_dir / "dataset.json")

    try:
        train = _split_and_train(config, dataset, plan)
    except Exception as err:
        raise PipelineError("train", err) from err

    write_json(run_dir / "split_manifest.json", {
        "root_seed": config.root_seed,
        "train_indices": train.train_indices.tolist(),
        "fold_assignments": train.fold_assignments.tolist(),
        "test_case_indices": train.test_case_indices.tolist(),
        "test1_control_indices": train.test1_control_indices.tolist(),
        "test2_control_indices": train.test2_control_indices.tolist(),
        "top_features": train.top_features.tolist(),
    })
    train.oof.to_csv(run_dir / "oof_matrix.csv")
    _importance_csv(run_dir / "importance.csv", train.importance, vocab)

    try:
        cv_reports = _cv_reports(config, train, plan)
    except Exception as err:
        raise PipelineError("cv-metrics", err) from err
    write_json(run_dir / "cv_metrics.json", cv_reports)
    for col, learner in enumerate(config.learners()):
        curve = metrics_mod.roc_points(train.oof.labels, train.oof.features[:, col])
        curve.to_csv(run_dir / f"roc_cv_{learner.key}.csv")

    bundle = EnsembleBundle(
        base_models=train.models,
        meta=train.meta,
        learner_keys=tuple(l.key for l in config.learners()),
        n_features=dataset.n_features,
        vocab_fingerprint=vocab.fingerprint(),
        root_seed=config.root_seed,
        refit_seeds=train.refit_seeds,
        learner_configs={l.key: l.config() for l in config.learners()},
    )
    save_bundle(bundle, run_dir / "ensemble.json")

    try:
        results = {}
        for name, controls in (("test1", train.test1_control_indices),
                               ("test2", train.test2_control_indices)):
            test_data, meta_probs, base_probs = _score_test_set(
                config, dataset, train, controls)
            report = metrics_mod.metric_report(
                test_data.labels, meta_probs, plan.generator(f"ci-{name}"),
                n_resamples=config.bootstrap_samples)
            base_auc = {key: metrics_mod.auc(test_data.labels, probs)
                        for key, probs in base_probs.items()}
            write_json(run_dir / f"metrics_{name}.json", {
                "meta": report.to_dict(),
                "base_auc": base_auc,
                "n_cases": int(test_data.labels.sum()),
                "n_controls": int((test_data.labels == 0).sum()),
            })
            curve = metrics_mod.roc_points(test_data.labels, meta_probs)
            curve.to_csv(run_dir / f"roc_{name}_meta.csv")
            results[name] = (report, base_auc)
    except Exception as err:
        raise PipelineError("evaluate", err) from err

    return RunResult(
        run_dir=run_dir,
        config_hash=config.config_hash(),
        test1_report=results["test1"][0],
        test2_report=results["test2"][0],
        test1_base_auc=results["test1"][1],
        test2_base_auc=results["test2"][1],
        cv_reports=cv_reports,
        importance=train.importance,
        vocab=vocab,
        train=train,
    )


def inspect_bundle(path) -> str:
    """Load and summarize a serialized ensemble bundle."""
    from .bundle import describe_bundle

    return describe_bundle(load_bundle(path))
