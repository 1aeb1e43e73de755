import math

import numpy as np
import pytest

from ehrstack.mlp import (AdamState, MlpArchitecture, MlpModel, adam_step,
                          apply_dropout, backward, cross_entropy, fit_mlp, forward,
                          init_params, predict_proba, softmax)
from ehrstack.rng import RngPlan

from conftest import make_dataset


def zero_params(arch):
    sizes = arch.layer_sizes()
    return [(np.zeros((a, b)), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]


class TestSoftmax:
    def test_equal_logits(self):
        assert np.allclose(softmax(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_extreme_logits_no_overflow(self):
        out = softmax(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0)
        assert out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_hand_example(self):
        # oracle: e^z / sum e^z at z = [1,2,3]
        z = np.array([1.0, 2.0, 3.0])
        expected = np.exp(z) / np.exp(z).sum()
        assert np.allclose(softmax(z[None, :]), expected[None, :], atol=1e-12)
        assert np.round(expected, 4).tolist() == [0.09, 0.2447, 0.6652]

    def test_sums_to_one_across_magnitudes(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            scale = 10 ** rng.uniform(-3, 3)
            z = rng.normal(size=(1, 5)) * scale
            assert softmax(z).sum() == pytest.approx(1.0, abs=1e-12)


class TestCrossEntropy:
    def test_perfect_prediction_near_zero(self):
        probs = np.array([[1.0 - 1e-15, 1e-15]])
        assert cross_entropy(probs, [0]) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_prediction_is_ln2_per_sample(self):
        probs = np.full((3, 2), 0.5)
        assert cross_entropy(probs, [0, 1, 0]) == pytest.approx(3 * math.log(2))
        assert cross_entropy(probs, [0, 1, 0], reduction="mean") == pytest.approx(math.log(2))

    def test_hand_example(self):
        # -ln 0.8 = 0.2231
        probs = np.array([[0.2, 0.8]])
        assert cross_entropy(probs, [1]) == pytest.approx(-math.log(0.8), abs=1e-12)
        assert round(-math.log(0.8), 4) == 0.2231

    def test_zero_probability_clipped(self):
        probs = np.array([[1.0, 0.0]])
        assert np.isfinite(cross_entropy(probs, [1]))


class TestForward:
    def test_zero_net_outputs_half(self):
        arch = MlpArchitecture(input_dim=3, hidden=(4,), dropout=0.0)
        probs, _ = forward(zero_params(arch), np.ones((2, 3)), arch)
        assert np.allclose(probs, 0.5)

    def test_no_dropout_train_equals_eval(self):
        arch = MlpArchitecture(input_dim=3, hidden=(4, 2), dropout=0.0)
        params = init_params(arch, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 3))
        train_probs, _ = forward(params, x, arch, train=True, rng=np.random.default_rng(2))
        eval_probs, _ = forward(params, x, arch)
        assert np.array_equal(train_probs, eval_probs)

    def test_hand_computed_two_layer_chain(self):
        # 1 input -> 1 hidden unit -> 2 outputs with hand-picked weights
        arch = MlpArchitecture(input_dim=1, hidden=(1,), n_classes=2, dropout=0.0)
        params = [
            (np.array([[2.0]]), np.array([-1.0])),        # z1 = 2x - 1
            (np.array([[1.0, -1.0]]), np.array([0.0, 0.5])),
        ]
        x = np.array([[1.5]])
        a1 = max(0.0, 2.0 * 1.5 - 1.0)                     # relu
        logits = np.array([a1 * 1.0, a1 * -1.0 + 0.5])
        expected = np.exp(logits) / np.exp(logits).sum()
        probs, _ = forward(params, x, arch)
        assert np.allclose(probs[0], expected, atol=1e-12)

    def test_dimension_mismatch_rejected(self):
        arch = MlpArchitecture(input_dim=3, hidden=(2,))
        with pytest.raises(ValueError):
            forward(zero_params(arch), np.ones((1, 4)), arch)

    def test_probabilities_sum_to_one(self):
        arch = MlpArchitecture(input_dim=4, hidden=(8, 4), dropout=0.0)
        params = init_params(arch, np.random.default_rng(3))
        probs, _ = forward(params, np.random.default_rng(4).normal(size=(7, 4)), arch)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)


class TestBackward:
    def test_output_layer_softmax_ce_identity(self):
        arch = MlpArchitecture(input_dim=2, hidden=(3,), dropout=0.0)
        params = init_params(arch, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 2))
        probs, cache = forward(params, x, arch)
        grads = backward(probs, [0, 1, 0, 1], cache)
        onehot = np.zeros_like(probs)
        onehot[np.arange(4), [0, 1, 0, 1]] = 1.0
        dz = probs - onehot
        expected_db = dz.sum(axis=0)
        assert np.allclose(grads[-1][1], expected_db, atol=1e-12)

    def test_symmetric_output_example(self):
        # p = [0.5, 0.5], target class 0 -> dz = [-0.5, 0.5]
        arch = MlpArchitecture(input_dim=2, hidden=(2,), dropout=0.0)
        probs, cache = forward(zero_params(arch), np.ones((1, 2)), arch)
        grads = backward(probs, [0], cache)
        assert np.allclose(grads[-1][1], [-0.5, 0.5])

    def test_zero_input_kills_first_layer_weight_grads(self):
        arch = MlpArchitecture(input_dim=3, hidden=(4,), dropout=0.0)
        params = init_params(arch, np.random.default_rng(0))
        probs, cache = forward(params, np.zeros((1, 3)), arch)
        grads = backward(probs, [1], cache)
        assert np.allclose(grads[0][0], 0.0)
        assert not np.allclose(grads[-1][1], 0.0)

    def test_matches_central_finite_differences(self):
        # independent oracle: perturb every parameter entry, recompute the loss.
        # ReLU is nondifferentiable at 0, so instances keep every pre-activation
        # away from the kink (random biases; redraw if any |z| < 1e-3).
        rng = np.random.default_rng(11)
        for trial in range(20):
            dims = rng.integers(1, 8, size=3)
            arch = MlpArchitecture(input_dim=int(dims[0]),
                                   hidden=(int(dims[1]), int(dims[2])), dropout=0.0)
            params = [(w, rng.normal(0, 0.5, b.shape))
                      for w, b in init_params(arch, np.random.default_rng(trial))]
            n = int(rng.integers(1, 5))
            while True:
                x = rng.normal(size=(n, arch.input_dim))
                y = rng.integers(0, 2, n)
                probs, cache = forward(params, x, arch)
                if min(np.abs(z).min() for z in cache["pre_acts"]) > 1e-3:
                    break
            grads = backward(probs, y, cache)

            def loss_at(p):
                out, _ = forward(p, x, arch)
                return cross_entropy(out, y)

            eps = 1e-5
            worst = 0.0
            for layer in range(len(params)):
                for part in range(2):
                    arr = params[layer][part]
                    grad = grads[layer][part]
                    flat = arr.ravel()
                    for idx in range(flat.size):
                        orig = flat[idx]
                        flat[idx] = orig + eps
                        up = loss_at(params)
                        flat[idx] = orig - eps
                        down = loss_at(params)
                        flat[idx] = orig
                        fd = (up - down) / (2 * eps)
                        g = grad.ravel()[idx]
                        rel = abs(g - fd) / max(abs(g), abs(fd), 1e-8)
                        worst = max(worst, rel)
            assert worst <= 1e-4


class TestDropout:
    def test_mask_is_binary_and_scaled(self):
        a = np.ones((4, 5))
        dropped, mask = apply_dropout(a, 0.3, np.random.default_rng(0))
        assert set(np.unique(mask)) <= {0.0, 1.0}
        assert np.allclose(dropped, a * mask / 0.7)

    def test_expectation_matches_eval_mode(self):
        # inverted scaling preserves the mean activation over many masks
        rng = np.random.default_rng(5)
        a = rng.random((1, 64)) + 0.5
        total = np.zeros_like(a)
        mask_rng = np.random.default_rng(99)
        n_draws = 10_000
        for _ in range(n_draws):
            dropped, _ = apply_dropout(a, 0.3, mask_rng)
            total += dropped
        mean = total / n_draws
        rel = np.linalg.norm(mean - a) / np.linalg.norm(a)
        assert rel <= 0.02

    def test_train_forward_uses_dropout(self):
        arch = MlpArchitecture(input_dim=3, hidden=(32,), dropout=0.5)
        params = init_params(arch, np.random.default_rng(0))
        x = np.ones((1, 3))
        a, cache = forward(params, x, arch, train=True, rng=np.random.default_rng(1))
        assert any(m is not None and (m == 0).any() for m in cache["masks"])

    def test_dropout_needs_rng_in_train_mode(self):
        arch = MlpArchitecture(input_dim=2, hidden=(2,), dropout=0.3)
        with pytest.raises(ValueError, match="rng"):
            forward(zero_params(arch), np.ones((1, 2)), arch, train=True)


class TestAdam:
    def test_hand_computed_first_step(self):
        # oracle: m1=0.1, v1=0.001, mhat=vhat=1, step = 1e-3/(1+1e-8)
        params = [(np.array([[0.0]]), np.array([0.0]))]
        grads = [(np.array([[1.0]]), np.array([0.0]))]
        state = AdamState.for_params(params)
        new = adam_step(params, grads, state)
        expected = -1e-3 * 1.0 / (1.0 + 1e-8)
        assert new[0][0][0, 0] == pytest.approx(expected, abs=1e-15)

    def test_zero_gradient_is_fixed_point(self):
        params = [(np.array([[1.5]]), np.array([0.5]))]
        grads = [(np.zeros((1, 1)), np.zeros(1))]
        state = AdamState.for_params(params)
        new = adam_step(params, grads, state)
        assert new[0][0][0, 0] == 1.5 and new[0][1][0] == 0.5

    def test_bias_correction_identity_at_t1(self):
        for g in (0.3, -2.0, 10.0):
            params = [(np.array([[0.0]]), np.array([0.0]))]
            grads = [(np.array([[g]]), np.array([0.0]))]
            state = AdamState.for_params(params)
            adam_step(params, grads, state)
            mhat = state.m[0][0][0, 0] / (1 - 0.9)
            assert mhat == pytest.approx(g, abs=1e-12)


class TestFitPredict:
    def test_linearly_separable_reaches_high_accuracy(self):
        rng = np.random.default_rng(0)
        dense = np.zeros((80, 2), dtype=int)
        dense[:40, 0] = 1
        dense[40:, 1] = 1
        labels = np.r_[np.ones(40, dtype=int), np.zeros(40, dtype=int)]
        data = make_dataset(dense, labels)
        arch = MlpArchitecture(input_dim=2, hidden=(8,), dropout=0.0)
        model = fit_mlp(data, arch=arch, epochs=50, batch_size=16, rng_plan=RngPlan(0))
        preds = (predict_proba(model, data.features) >= 0.5).astype(int)
        assert (preds == labels).mean() >= 0.99

    def test_zero_epochs_returns_initialization(self):
        data = make_dataset(np.eye(3, dtype=int), [1, 0, 1])
        arch = MlpArchitecture(input_dim=3, hidden=(4,), dropout=0.3)
        model = fit_mlp(data, arch=arch, epochs=0, rng_plan=RngPlan(9))
        seed = RngPlan(9).child_seed("mlp")
        expected = init_params(arch, np.random.Generator(np.random.PCG64(seed)))
        for (w, b), (we, be) in zip(model.params, expected):
            assert np.array_equal(w, we) and np.array_equal(b, be)
        assert model.loss_trace == []

    def test_same_seed_same_loss_trace(self):
        data = make_dataset((np.random.default_rng(2).random((40, 6)) < 0.3).astype(int),
                            np.r_[np.ones(20, dtype=int), np.zeros(20, dtype=int)])
        a = fit_mlp(data, arch=MlpArchitecture(6, (8,), dropout=0.3), epochs=5,
                    rng_plan=RngPlan(4))
        b = fit_mlp(data, arch=MlpArchitecture(6, (8,), dropout=0.3), epochs=5,
                    rng_plan=RngPlan(4))
        assert a.loss_trace == b.loss_trace

    def test_predict_proba_sums_with_complement(self):
        data = make_dataset(np.eye(4, dtype=int), [1, 0, 1, 0])
        model = fit_mlp(data, arch=MlpArchitecture(4, (4,), dropout=0.0), epochs=3,
                        rng_plan=RngPlan(1))
        probs, _ = forward(model.params, data.features.to_dense(np.float64), model.arch)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert np.allclose(predict_proba(model, data.features), probs[:, 1])

    def test_eval_mode_deterministic(self):
        data = make_dataset(np.eye(4, dtype=int), [1, 0, 1, 0])
        model = fit_mlp(data, arch=MlpArchitecture(4, (8,), dropout=0.5), epochs=2,
                        rng_plan=RngPlan(2))
        a = predict_proba(model, data.features)
        b = predict_proba(model, data.features)
        assert np.array_equal(a, b)

    def test_serialization_round_trip(self):
        data = make_dataset(np.eye(4, dtype=int), [1, 0, 1, 0])
        model = fit_mlp(data, arch=MlpArchitecture(4, (4, 2), dropout=0.1), epochs=2,
                        rng_plan=RngPlan(3))
        again = MlpModel.from_dict(model.to_dict())
        assert np.allclose(predict_proba(again, data.features),
                           predict_proba(model, data.features), atol=1e-15)


class TestArchitecture:
    def test_default_hidden_stack(self):
        arch = MlpArchitecture(input_dim=100)
        assert arch.hidden == (512, 256, 128, 64, 32)
        assert arch.dropout == 0.3

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            MlpArchitecture(input_dim=0)
        with pytest.raises(ValueError):
            MlpArchitecture(input_dim=3, dropout=1.0)
