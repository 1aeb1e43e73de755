"""Feed-forward network trained by Adam: ReLU hidden layers, inverted dropout,
softmax output with cross-entropy loss.

The default architecture is five hidden layers of 512, 256, 128, 64 and 32
units with dropout rate 0.3 on hidden activations (never on input or output)
and a 2-class softmax head. Everything runs in float64 numpy; training is
single-threaded per model so a fixed seed reproduces the loss trace bit for
bit, and separate models (CV folds) can train concurrently.

Loss and gradients use the sum form L = -sum_i sum_j y_ij log yhat_ij, so the
output-layer error is exactly probs - onehot; the per-epoch trace records the
mean per-sample loss for readability. Adam is scale-invariant enough that the
sum/mean distinction does not affect training behavior.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import RngPlan
from .sparse import LabeledDataset, SparseBinaryMatrix

LOSS_EPS = 1e-15


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden: tuple = (512, 256, 128, 64, 32)
    n_classes: int = 2
    dropout: float = 0.3

    def __post_init__(self):
        sizes = (self.input_dim, *self.hidden, self.n_classes)
        if any(s < 1 for s in sizes):
            raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def layer_sizes(self) -> tuple:
        return (self.input_dim, *self.hidden, self.n_classes)


def init_params(arch: MlpArchitecture, rng: np.random.Generator) -> list:
    """He-scaled normal weights (variance 2/fan_in) and zero biases."""
    sizes = arch.layer_sizes()
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        params.append((w, np.zeros(fan_out)))
    return params


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction; safe for extreme logits."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_dropout(a: np.ndarray, rate: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Inverted dropout: zero units with probability rate, scale by 1/(1-rate).

    Returns (masked activations, 0/1 mask). Expectation over masks equals the
    unmasked activations, so eval mode applies no correction.
    """
    mask = (rng.random(a.shape) >= rate).astype(np.float64)
    return a * mask / (1.0 - rate), mask


def forward(params, x: np.ndarray, arch: MlpArchitecture, train: bool = False,
            rng: np.random.Generator | None = None):
    """Forward pass; returns (probabilities, cache for backward).

    In train mode dropout masks are drawn from rng for every hidden layer;
    eval mode is deterministic. x is (batch, input_dim).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != arch.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != architecture dim {arch.input_dim}")
    use_dropout = train and arch.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")

    activations = [x]
    pre_acts = []
    masks = []
    a = x
    for w, b in params[:-1]:
        z = a @ w + b
        a = np.maximum(z, 0.0)
        if use_dropout:
            a, mask = apply_dropout(a, arch.dropout, rng)
            masks.append(mask)
        else:
            masks.append(None)
        pre_acts.append(z)
        activations.append(a)
    w_out, b_out = params[-1]
    logits = a @ w_out + b_out
    probs = softmax(logits)
    cache = {"activations": activations, "pre_acts": pre_acts, "masks": masks,
             "params": params, "arch": arch}
    return probs, cache


def cross_entropy(probs: np.ndarray, labels: np.ndarray, reduction: str = "sum") -> float:
    """Cross-entropy of softmax outputs against integer class labels.

    reduction "sum" is the raw summed loss; "mean" divides by the batch size.
    Probabilities are clipped at 1e-15 before the log.
    """
    probs = np.atleast_2d(probs)
    labels = np.asarray(labels, dtype=np.int64)
    picked = np.clip(probs[np.arange(labels.size), labels], LOSS_EPS, None)
    total = float(-np.log(picked).sum())
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / labels.size
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(probs: np.ndarray, labels: np.ndarray, cache: dict) -> list:
    """Gradients of the sum-form loss for every (W, b), output layer first in math,
    returned in layer order.

    The softmax/cross-entropy pair collapses to dz = probs - onehot at the
    output; hidden layers backpropagate through the stored dropout masks and
    ReLU gates.
    """
    params = cache["params"]
    arch = cache["arch"]
    activations = cache["activations"]
    pre_acts = cache["pre_acts"]
    masks = cache["masks"]
    labels = np.asarray(labels, dtype=np.int64)

    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    dz = probs - onehot

    grads: list = [None] * len(params)
    grads[-1] = (activations[-1].T @ dz, dz.sum(axis=0))
    da = dz @ params[-1][0].T
    for layer in range(len(params) - 2, -1, -1):
        if masks[layer] is not None:
            da = da * masks[layer] / (1.0 - arch.dropout)
        dz = da * (pre_acts[layer] > 0.0)
        grads[layer] = (activations[layer].T @ dz, dz.sum(axis=0))
        if layer:
            da = dz @ params[layer][0].T
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: list
    v: list
    t: int = 0
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, alpha: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        zeros = lambda arr: np.zeros_like(arr)
        return cls(
            m=[(zeros(w), zeros(b)) for w, b in params],
            v=[(zeros(w), zeros(b)) for w, b in params],
            alpha=alpha, beta1=beta1, beta2=beta2, eps=eps,
        )


def adam_step(params, grads, state: AdamState) -> list:
    """One Adam update; returns new parameters and advances the state.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;  bias-corrected mhat, vhat;
    param <- param - alpha * mhat / (sqrt(vhat) + eps).
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    new_params = []
    for layer, (w, b) in enumerate(params):
        updated = []
        new_m, new_v = [], []
        for arr, g, m, v in zip((w, b), grads[layer], state.m[layer], state.v[layer]):
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            step = state.alpha * (m / c1) / (np.sqrt(v / c2) + state.eps)
            updated.append(arr - step)
            new_m.append(m)
            new_v.append(v)
        state.m[layer] = tuple(new_m)
        state.v[layer] = tuple(new_v)
        new_params.append(tuple(updated))
    return new_params


@dataclass
class MlpModel:
    arch: MlpArchitecture
    params: list
    loss_trace: list = field(default_factory=list)
    seed: int | None = None
    vocab_fingerprint: str | None = None

    def to_dict(self) -> dict:
        return {
            "kind": "mlp",
            "input_dim": self.arch.input_dim,
            "hidden": list(self.arch.hidden),
            "n_classes": self.arch.n_classes,
            "dropout": self.arch.dropout,
            "seed": self.seed,
            "vocab_fingerprint": self.vocab_fingerprint,
            "loss_trace": list(self.loss_trace),
            "weights": [w.tolist() for w, _ in self.params],
            "biases": [b.tolist() for _, b in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        arch = MlpArchitecture(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            n_classes=int(d["n_classes"]),
            dropout=float(d["dropout"]),
        )
        params = [
            (np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
            for w, b in zip(d["weights"], d["biases"])
        ]
        return cls(arch=arch, params=params, loss_trace=list(d.get("loss_trace", [])),
                   seed=d.get("seed"), vocab_fingerprint=d.get("vocab_fingerprint"))


def _densify(features) -> np.ndarray:
    if isinstance(features, SparseBinaryMatrix):
        return features.to_dense(dtype=np.float64)
    return np.atleast_2d(np.asarray(features, dtype=np.float64))


def fit_mlp(
    data: LabeledDataset,
    arch: MlpArchitecture | None = None,
    epochs: int = 100,
    batch_size: int = 32,
    learning_rate: float = 1e-3,
    rng_plan: RngPlan | int = 0,
) -> MlpModel:
    """Mini-batch Adam training with per-epoch shuffling and dropout.

    Sparse rows are densified one mini-batch at a time. epochs=0 returns the
    seeded initialization untouched. The loss trace holds one mean-per-sample
    cross-entropy value per epoch, computed from the training batches.
    """
    plan = rng_plan if isinstance(rng_plan, RngPlan) else RngPlan(int(rng_plan))
    seed = plan.child_seed("mlp")
    rng = np.random.Generator(np.random.PCG64(seed))
    if arch is None:
        arch = MlpArchitecture(input_dim=data.n_features)
    if arch.input_dim != data.n_features:
        raise ValueError("architecture input_dim does not match the dataset")

    params = init_params(arch, rng)
    state = AdamState.for_params(params, alpha=learning_rate)
    y = data.labels.astype(np.int64)
    n = y.size
    trace: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            x = _densify(data.features.select_rows(batch))
            probs, cache = forward(params, x, arch, train=True, rng=rng)
            epoch_loss += cross_entropy(probs, y[batch], reduction="sum")
            grads = backward(probs, y[batch], cache)
            params = adam_step(params, grads, state)
        trace.append(epoch_loss / n)

    return MlpModel(arch=arch, params=params, loss_trace=trace, seed=seed,
                    vocab_fingerprint=data.vocab_fingerprint)


def predict_proba(model: MlpModel, features) -> np.ndarray:
    """Eval-mode positive-class probabilities (dropout off, deterministic)."""
    x = _densify(features)
    probs, _ = forward(model.params, x, model.arch, train=False)
    return probs[:, 1]
