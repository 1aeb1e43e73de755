"""Stacked-ensemble learning toolkit for EHR cohort classification.

From-scratch random forest, gradient-boosted trees and MLP base learners,
stacked through out-of-fold predictions into a ridge-penalized logistic
meta-learner, with MIMIC-style cohort ingestion, balanced sampling, a
synthetic cohort generator, and a bootstrap-CI evaluation suite.
"""

from . import (boosting, bundle, forest, ingest, learners, metrics, mlp,
               pipeline, sampling, sparse, stacking, synthetic)
from .rng import RngPlan
from .sparse import FeatureVocabulary, LabeledDataset, SparseBinaryMatrix

__all__ = [
    "RngPlan",
    "FeatureVocabulary",
    "LabeledDataset",
    "SparseBinaryMatrix",
    "boosting",
    "bundle",
    "forest",
    "ingest",
    "learners",
    "metrics",
    "mlp",
    "pipeline",
    "sampling",
    "sparse",
    "stacking",
    "synthetic",
]

__version__ = "0.1.0"
