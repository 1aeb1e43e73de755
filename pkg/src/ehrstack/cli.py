"""Command-line entry points for the cohort pipeline.

Subcommands: synth, ingest, train, evaluate, importance, inspect, run. All of
them read the same TOML config (see configs/ in the repo for a template) and
accept flag overrides for the common knobs. Exit codes: 0 success, 1 config or
validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import ingest as ingest_mod
from . import metrics as metrics_mod
from . import stacking, synthetic
from .bundle import EnsembleBundle, load_bundle, save_bundle
from .learners import BoostedLearner, ForestLearner, NeuralNetLearner, predict_with
from .pipeline import (PipelineConfig, PipelineError, inspect_bundle, run_pipeline,
                       write_json)
from .rng import RngPlan

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def build_config(raw: dict, args: argparse.Namespace) -> PipelineConfig:
    """Merge a parsed TOML dict with CLI overrides into a PipelineConfig."""
    cfg = PipelineConfig()
    scalar_keys = ("root_seed", "out_dir", "workers", "holdout_k", "n_folds",
                   "top_n_risk", "meta_lambda", "bootstrap_samples",
                   "include_procedures", "reuse_fold_models")
    for key in scalar_keys:
        if key in raw:
            setattr(cfg, key, raw[key])
    if "inputs" in raw:
        cfg.inputs = dict(raw["inputs"])
    if "synthetic" in raw:
        cfg.synthetic_spec = synthetic.SyntheticSpec.from_dict(raw["synthetic"])
    if "rf" in raw:
        cfg.rf = ForestLearner(**raw["rf"])
    if "lgbm" in raw:
        lg = dict(raw["lgbm"])
        cfg.lgbm = BoostedLearner(**lg)
    if "dnn" in raw:
        dn = dict(raw["dnn"])
        if "hidden" in dn:
            dn["hidden"] = tuple(dn["hidden"])
        cfg.dnn = NeuralNetLearner(**dn)

    if getattr(args, "synthetic", False) and cfg.synthetic_spec is None:
        cfg.synthetic_spec = synthetic.SyntheticSpec(exact_cases=60)
    if getattr(args, "seed", None) is not None:
        cfg.root_seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    for flag, apply in (
        ("holdout_k", lambda v: setattr(cfg, "holdout_k", v)),
        ("folds", lambda v: setattr(cfg, "n_folds", v)),
        ("top_n", lambda v: setattr(cfg, "top_n_risk", v)),
        ("rf_trees", lambda v: setattr(cfg, "rf", ForestLearner(n_trees=v, max_depth=cfg.rf.max_depth))),
        ("lgbm_rounds", lambda v: setattr(cfg, "lgbm", BoostedLearner(
            n_rounds=v, learning_rate=cfg.lgbm.learning_rate,
            max_leaves=cfg.lgbm.max_leaves, reg_lambda=cfg.lgbm.reg_lambda,
            min_samples_leaf=cfg.lgbm.min_samples_leaf))),
        ("dnn_epochs", lambda v: setattr(cfg, "dnn", NeuralNetLearner(
            hidden=cfg.dnn.hidden, dropout=cfg.dnn.dropout, epochs=v,
            batch_size=cfg.dnn.batch_size, learning_rate=cfg.dnn.learning_rate))),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            apply(value)
    if cfg.synthetic_spec is not None and getattr(args, "seed", None) is not None:
        # one seed drives everything, including generation
        spec = synthetic.SyntheticSpec.from_dict(
            {**cfg.synthetic_spec.to_dict(), "seed": args.seed})
        cfg.synthetic_spec = spec
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="TOML config file")
    parser.add_argument("--seed", type=int, help="root seed override")
    parser.add_argument("--out", help="output directory override")
    parser.add_argument("--workers", type=int, help="concurrent training jobs")
    parser.add_argument("--synthetic", action="store_true",
                        help="use the default desk-scale synthetic cohort")
    parser.add_argument("--holdout-k", dest="holdout_k", type=int)
    parser.add_argument("--folds", type=int)
    parser.add_argument("--top-n", dest="top_n", type=int)
    parser.add_argument("--rf-trees", dest="rf_trees", type=int)
    parser.add_argument("--lgbm-rounds", dest="lgbm_rounds", type=int)
    parser.add_argument("--dnn-epochs", dest="dnn_epochs", type=int)


def cmd_run(args) -> int:
    cfg = build_config(_load_toml(args.config), args)
    result = run_pipeline(cfg)
    print(f"run directory: {result.run_dir}")
    auc1 = result.test1_report["auc"][0]
    auc2 = result.test2_report["auc"][0]
    print(f"meta AUC  testing set 1: {auc1:.4f}  testing set 2: {auc2:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = build_config(_load_toml(args.config), args)
    spec = cfg.synthetic_spec or synthetic.SyntheticSpec(exact_cases=60)
    tables = synthetic.generate_cohort(spec)
    out = Path(cfg.out_dir)
    paths = synthetic.emit_csvs(tables, out)
    print(json.dumps(paths, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_ingest(args) -> int:
    cfg = build_config(_load_toml(args.config), args)
    if cfg.inputs is None:
        raise ValueError("ingest needs [inputs] paths in the config")
    tables = ingest_mod.load_tables(cfg.inputs["patients"], cfg.inputs["admissions"],
                                    cfg.inputs["diagnoses"], cfg.inputs["procedures"])
    cohorts = ingest_mod.build_cohorts(tables)
    vocab = ingest_mod.build_vocabulary(tables, cohorts, cfg.include_procedures)
    dataset = ingest_mod.encode_features(tables, cohorts, vocab, cfg.include_procedures)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ingest_mod.save_dataset(dataset, vocab, out / "dataset.json")
    write_json(out / "ingest_report.json", tables.report.to_dict())
    print(f"{dataset.n_samples} patients, {int(dataset.labels.sum())} cases, "
          f"{dataset.n_features} features -> {out / 'dataset.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    # full-pipeline training on a prebuilt dataset file
    from .pipeline import _cv_reports, _split_and_train

    cfg = build_config(_load_toml(args.config), args)
    dataset, vocab = ingest_mod.load_dataset(args.dataset)
    plan = RngPlan(cfg.root_seed)
    train = _split_and_train(cfg, dataset, plan)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "split_manifest.json", {
        "root_seed": cfg.root_seed,
        "train_indices": train.train_indices.tolist(),
        "fold_assignments": train.fold_assignments.tolist(),
        "test_case_indices": train.test_case_indices.tolist(),
        "test1_control_indices": train.test1_control_indices.tolist(),
        "test2_control_indices": train.test2_control_indices.tolist(),
        "top_features": train.top_features.tolist(),
    })
    train.oof.to_csv(out / "oof_matrix.csv")
    write_json(out / "cv_metrics.json", _cv_reports(cfg, train, plan))
    bundle = EnsembleBundle(
        base_models=train.models,
        meta=train.meta,
        learner_keys=tuple(l.key for l in cfg.learners()),
        n_features=dataset.n_features,
        vocab_fingerprint=vocab.fingerprint(),
        root_seed=cfg.root_seed,
        refit_seeds=train.refit_seeds,
        learner_configs={l.key: l.config() for l in cfg.learners()},
    )
    save_bundle(bundle, out / "ensemble.json")
    print(f"trained ensemble -> {out / 'ensemble.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = build_config(_load_toml(args.config), args)
    dataset, _ = ingest_mod.load_dataset(args.dataset)
    bundle = load_bundle(args.bundle)
    if (bundle.vocab_fingerprint and dataset.vocab_fingerprint
            and bundle.vocab_fingerprint != dataset.vocab_fingerprint):
        raise ValueError("bundle and dataset vocabulary fingerprints differ")
    manifest = json.loads(Path(args.split_manifest).read_text(encoding="utf-8"))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = RngPlan(cfg.root_seed)
    case_idx = np.asarray(manifest["test_case_indices"], dtype=np.int64)
    for name in ("test1", "test2"):
        controls = np.asarray(manifest[f"{name}_control_indices"], dtype=np.int64)
        test_data = dataset.subset(np.r_[case_idx, controls])
        base_probs = {key: predict_with(key, bundle.base_models[key], test_data.features)
                      for key in bundle.learner_keys}
        stacked = np.column_stack([base_probs[key] for key in bundle.learner_keys])
        meta_probs = np.atleast_1d(stacking.predict_meta(bundle.meta, stacked))
        report = metrics_mod.metric_report(
            test_data.labels, meta_probs, plan.generator(f"ci-{name}"),
            n_resamples=cfg.bootstrap_samples)
        write_json(out / f"metrics_{name}.json", {
            "meta": report.to_dict(),
            "base_auc": {k: metrics_mod.auc(test_data.labels, v)
                         for k, v in base_probs.items()},
            "n_cases": int(test_data.labels.sum()),
            "n_controls": int((test_data.labels == 0).sum()),
        })
        metrics_mod.roc_points(test_data.labels, meta_probs).to_csv(
            out / f"roc_{name}_meta.csv")
        print(f"{name}: meta AUC {report['auc'][0]:.4f} -> {out / f'metrics_{name}.json'}")
    return EXIT_OK


def cmd_importance(args) -> int:
    from .forest import gini_importance
    from .pipeline import _importance_csv

    cfg = build_config(_load_toml(args.config), args)
    _, vocab = ingest_mod.load_dataset(args.dataset)
    bundle = load_bundle(args.bundle)
    importance = gini_importance(bundle.base_models["rf"])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _importance_csv(out / "importance.csv", importance, vocab)
    print(f"importance ranking -> {out / 'importance.csv'}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(inspect_bundle(args.bundle))
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ehrstack",
        description="Stacked-ensemble cohort pipeline: ingest, train, stack, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline into a run directory")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_synth = sub.add_parser("synth", help="generate synthetic MIMIC-style CSVs")
    _add_common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_ingest = sub.add_parser("ingest", help="CSV tables -> encoded dataset file")
    _add_common(p_ingest)
    p_ingest.set_defaults(func=cmd_ingest)

    p_train = sub.add_parser("train", help="dataset file -> trained ensemble bundle")
    _add_common(p_train)
    p_train.add_argument("--dataset", required=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score the two testing sets")
    _add_common(p_eval)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--bundle", required=True)
    p_eval.add_argument("--split-manifest", dest="split_manifest", required=True)
    p_eval.set_defaults(func=cmd_evaluate)

    p_imp = sub.add_parser("importance", help="feature-importance ranking from a bundle")
    _add_common(p_imp)
    p_imp.add_argument("--dataset", required=True)
    p_imp.add_argument("--bundle", required=True)
    p_imp.set_defaults(func=cmd_importance)

    p_inspect = sub.add_parser("inspect", help="summarize a serialized bundle")
    p_inspect.add_argument("bundle")
    p_inspect.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, TypeError, FileNotFoundError, KeyError) as err:
        # bad config values, unknown config keys, missing files/paths
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # pragma: no cover - unexpected failure path
        print(f"unexpected error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
