"""Uniform fit/predict adapters over the three base model families.

Stacking code treats every base model the same way: a learner spec carries
hyperparameters, ``fit(data, seed)`` returns a fitted model, and
``predict(model, features)`` returns positive-class probabilities. The keys
("rf", "lgbm", "dnn") name the columns of the meta-feature matrix and the
entries of the serialized bundle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import boosting, forest, mlp
from .rng import RngPlan
from .sparse import LabeledDataset, SparseBinaryMatrix


@dataclass(frozen=True)
class ForestLearner:
    key: str = "rf"
    n_trees: int = 100
    max_depth: int | None = None

    def fit(self, data: LabeledDataset, seed: int):
        return forest.fit_forest(data, n_trees=self.n_trees, rng_plan=RngPlan(seed),
                                 max_depth=self.max_depth)

    def predict(self, model, features: SparseBinaryMatrix) -> np.ndarray:
        return forest.predict_proba_batch(model, features)

    def config(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth}


@dataclass(frozen=True)
class BoostedLearner:
    key: str = "lgbm"
    n_rounds: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    reg_lambda: float = 1.0
    min_samples_leaf: int = 2
    subsample_rows: float = 1.0
    subsample_features: float = 1.0

    def fit(self, data: LabeledDataset, seed: int):
        # growth is deterministic unless the subsample fractions are below 1
        return boosting.fit_boosted(
            data,
            n_rounds=self.n_rounds,
            eta=self.learning_rate,
            max_leaves=self.max_leaves,
            reg_lambda=self.reg_lambda,
            min_samples_leaf=self.min_samples_leaf,
            subsample_rows=self.subsample_rows,
            subsample_features=self.subsample_features,
            rng_plan=RngPlan(seed),
        )

    def predict(self, model, features: SparseBinaryMatrix) -> np.ndarray:
        return boosting.predict_proba(model, features)

    def config(self) -> dict:
        return {
            "n_rounds": self.n_rounds,
            "learning_rate": self.learning_rate,
            "max_leaves": self.max_leaves,
            "reg_lambda": self.reg_lambda,
            "min_samples_leaf": self.min_samples_leaf,
            "subsample_rows": self.subsample_rows,
            "subsample_features": self.subsample_features,
        }


@dataclass(frozen=True)
class NeuralNetLearner:
    key: str = "dnn"
    hidden: tuple = (512, 256, 128, 64, 32)
    dropout: float = 0.3
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3

    def fit(self, data: LabeledDataset, seed: int):
        arch = mlp.MlpArchitecture(input_dim=data.n_features, hidden=tuple(self.hidden),
                                   dropout=self.dropout)
        return mlp.fit_mlp(data, arch=arch, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, rng_plan=RngPlan(seed))

    def predict(self, model, features: SparseBinaryMatrix) -> np.ndarray:
        return mlp.predict_proba(model, features)

    def config(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "dropout": self.dropout,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
        }


def default_learners() -> tuple:
    """The standard RF + boosted-trees + DNN trio, in meta-column order."""
    return (ForestLearner(), BoostedLearner(), NeuralNetLearner())


def model_to_dict(key: str, model) -> dict:
    return model.to_dict()


def model_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "random_forest":
        return forest.Forest.from_dict(d)
    if kind == "boosted_trees":
        return boosting.BoostedEnsemble.from_dict(d)
    if kind == "mlp":
        return mlp.MlpModel.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


def predict_with(key: str, model, features: SparseBinaryMatrix) -> np.ndarray:
    """Dispatch prediction for a deserialized model by learner key."""
    if key == "rf":
        return forest.predict_proba_batch(model, features)
    if key == "lgbm":
        return boosting.predict_proba(model, features)
    if key == "dnn":
        return mlp.predict_proba(model, features)
    raise ValueError(f"unknown learner key {key!r}")
