"""Serialized ensemble bundle: three base models, meta coefficients, seeds.

One JSON file carries everything needed to score new rows encoded against the
same vocabulary: model parameters, the meta-learner, the vocabulary size and
fingerprint, and the seeds that produced the fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from . import learners as learners_mod
from .stacking import LogisticModel

BUNDLE_FORMAT = "ehrstack-ensemble-v1"


@dataclass
class EnsembleBundle:
    base_models: dict
    meta: LogisticModel
    learner_keys: tuple
    n_features: int
    vocab_fingerprint: str | None
    root_seed: int
    refit_seeds: dict
    learner_configs: dict

    def to_dict(self) -> dict:
        return {
            "format": BUNDLE_FORMAT,
            "root_seed": self.root_seed,
            "n_features": self.n_features,
            "vocab_fingerprint": self.vocab_fingerprint,
            "learner_keys": list(self.learner_keys),
            "refit_seeds": dict(self.refit_seeds),
            "learner_configs": dict(self.learner_configs),
            "meta": self.meta.to_dict(),
            "models": {key: self.base_models[key].to_dict() for key in self.learner_keys},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleBundle":
        if d.get("format") != BUNDLE_FORMAT:
            raise ValueError(f"unrecognized bundle format {d.get('format')!r}")
        keys = tuple(d["learner_keys"])
        return cls(
            base_models={key: learners_mod.model_from_dict(d["models"][key]) for key in keys},
            meta=LogisticModel.from_dict(d["meta"]),
            learner_keys=keys,
            n_features=int(d["n_features"]),
            vocab_fingerprint=d.get("vocab_fingerprint"),
            root_seed=int(d["root_seed"]),
            refit_seeds={k: int(v) for k, v in d.get("refit_seeds", {}).items()},
            learner_configs=d.get("learner_configs", {}),
        )


def save_bundle(bundle: EnsembleBundle, path) -> None:
    Path(path).write_text(json.dumps(bundle.to_dict(), sort_keys=True), encoding="utf-8")


def load_bundle(path) -> EnsembleBundle:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise ValueError(f"bundle {path} is not valid JSON at byte {err.pos}: {err.msg}") from err
    return EnsembleBundle.from_dict(payload)


def describe_bundle(bundle: EnsembleBundle) -> str:
    """Human-readable summary: model shapes, seeds, meta coefficients."""
    lines = [
        f"ensemble bundle (root seed {bundle.root_seed})",
        f"  features: {bundle.n_features}  vocabulary fingerprint: {bundle.vocab_fingerprint}",
    ]
    for key in bundle.learner_keys:
        model = bundle.base_models[key]
        seed = bundle.refit_seeds.get(key)
        if key == "rf":
            lines.append(f"  rf: {model.n_trees()} trees (seed {seed})")
        elif key == "lgbm":
            lines.append(
                f"  lgbm: {model.n_trees()} rounds, eta {model.eta}, "
                f"max_leaves {model.max_leaves}, lambda {model.reg_lambda} (seed {seed})"
            )
        elif key == "dnn":
            sizes = "-".join(str(s) for s in model.arch.hidden)
            lines.append(
                f"  dnn: hidden {sizes}, dropout {model.arch.dropout} (seed {seed})"
            )
    coefs = ", ".join(f"b{i + 1}={float(c)!r}" for i, c in enumerate(bundle.meta.coefficients))
    lines.append(f"  meta: b0={bundle.meta.intercept!r}, {coefs} "
                 f"(lambda {bundle.meta.reg_lambda}, converged {bundle.meta.converged})")
    return "\n".join(lines)
