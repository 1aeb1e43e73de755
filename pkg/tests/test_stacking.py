import numpy as np
import pytest

from ehrstack import metrics
from ehrstack.learners import BoostedLearner, ForestLearner, NeuralNetLearner
from ehrstack.rng import RngPlan
from ehrstack.sampling import stratified_kfold
from ehrstack.stacking import (LogisticModel, MetaFeatureMatrix, build_oof_matrix,
                               fit_logistic, fit_logistic_array, penalized_loglik,
                               predict_meta, refit_and_predict)

from conftest import make_dataset, planted_dataset

FAST_LEARNERS = (
    ForestLearner(n_trees=10),
    BoostedLearner(n_rounds=10),
    NeuralNetLearner(hidden=(8,), epochs=10, dropout=0.1),
)


class MemorizingProbe:
    """Test-only learner that memorizes training rows; 0.5 on unseen rows.

    In-sample it is perfect, so any out-of-fold accuracy above chance would
    prove the stacking harness leaked training rows into scoring.
    """

    key = "probe"

    def fit(self, data, seed):
        table = {tuple(data.features.row(i).tolist()): float(data.labels[i])
                 for i in range(data.n_samples)}
        return table

    def predict(self, model, features):
        return np.array([model.get(tuple(features.row(i).tolist()), 0.5)
                         for i in range(features.n_rows)])


def grid_maximize_1feature(x, y, lam):
    """Independent oracle: nested grid search over (intercept, slope)."""
    x_aug = np.column_stack([np.ones(len(y)), x])
    y = np.asarray(y, dtype=np.float64)
    center = np.zeros(2)
    width = 8.0
    for _ in range(6):
        b0s = np.linspace(center[0] - width, center[0] + width, 41)
        b1s = np.linspace(center[1] - width, center[1] + width, 41)
        best, best_val = None, -np.inf
        for b0 in b0s:
            for b1 in b1s:
                val = penalized_loglik(np.array([b0, b1]), x_aug, y, lam)
                if val > best_val:
                    best_val, best = val, (b0, b1)
        center = np.array(best)
        width = width / 10.0
    return center


class TestOofMatrix:
    def test_shape_and_range(self, rng):
        data = planted_dataset(rng, n=60, p=10)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(0))
        oof = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(0))
        assert oof.features.shape == (60, 3)
        assert oof.features.min() >= 0.0 and oof.features.max() <= 1.0
        assert oof.column_names == ("p_rf", "p_lgbm", "p_dnn")

    def test_minimal_two_fold_stacking(self):
        data = make_dataset(np.eye(4, dtype=int), [1, 0, 1, 0])
        folds = np.array([0, 0, 1, 1])
        oof = build_oof_matrix(data, folds, (ForestLearner(n_trees=3),), RngPlan(1))
        assert oof.features.shape == (4, 1)
        assert np.all(np.isfinite(oof.features))

    def test_single_class_fold_rejected(self):
        data = make_dataset(np.eye(4, dtype=int), [1, 1, 0, 0])
        folds = np.array([0, 0, 1, 1])
        with pytest.raises(ValueError, match="single class"):
            build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(0))

    def test_memorizing_probe_scores_at_chance(self):
        # rows are unique and labels random: the probe aces in-sample but its
        # out-of-fold AUC must sit at chance, proving nothing leaks
        rng = np.random.default_rng(1)
        dense = np.zeros((200, 60), dtype=int)
        for i in range(200):  # guarantee distinct rows
            dense[i, rng.choice(60, size=6, replace=False)] = 1
        labels = rng.integers(0, 2, 200)
        labels[:2] = [0, 1]
        data = make_dataset(dense, labels)
        probe = MemorizingProbe()
        in_sample = probe.predict(probe.fit(data, 0), data.features)
        assert metrics.auc(labels, in_sample) == 1.0

        folds = stratified_kfold(labels, 5, np.random.default_rng(2))
        oof = build_oof_matrix(data, folds, (probe,), RngPlan(3))
        assert 0.4 <= metrics.auc(labels, oof.features[:, 0]) <= 0.6

    def test_oof_rows_pure_function_of_other_folds(self):
        # perturbing fold k's labels must leave fold k's own OOF rows intact
        rng = np.random.default_rng(4)
        data = planted_dataset(rng, n=60, p=8)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(5))
        learner = (ForestLearner(n_trees=5),)
        base = build_oof_matrix(data, folds, learner, RngPlan(7))

        flipped = data.labels.copy()
        k = 1
        flipped[folds == k] = 1 - flipped[folds == k]
        perturbed_data = make_dataset(data.features.to_dense(), flipped)
        perturbed = build_oof_matrix(perturbed_data, folds, learner, RngPlan(7))

        rows_k = folds == k
        assert np.array_equal(base.features[rows_k], perturbed.features[rows_k])
        assert not np.array_equal(base.features[~rows_k], perturbed.features[~rows_k])

    def test_worker_count_does_not_change_result(self, rng):
        data = planted_dataset(rng, n=45, p=8)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(1))
        a = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(2), workers=1)
        b = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(2), workers=8)
        assert np.array_equal(a.features, b.features)

    def test_csv_export_schema(self, rng, tmp_path):
        data = planted_dataset(rng, n=30, p=6)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(1))
        oof = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(2))
        path = tmp_path / "oof.csv"
        oof.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "sample_id,p_rf,p_lgbm,p_dnn,label"


class TestMetaFeatureMatrix:
    def test_rejects_probabilities_outside_unit_interval(self):
        with pytest.raises(ValueError, match="probabilities"):
            MetaFeatureMatrix(np.array([[1.5, 0.2, 0.3]]), np.array([1]),
                              ("a",), ("p_rf", "p_lgbm", "p_dnn"))

    def test_rejects_column_mismatch(self):
        with pytest.raises(ValueError):
            MetaFeatureMatrix(np.zeros((2, 2)), np.array([0, 1]), ("a", "b"),
                              ("p_rf", "p_lgbm", "p_dnn"))


class TestFitLogistic:
    def test_perfect_column_grows_with_vanishing_penalty(self):
        rng = np.random.default_rng(0)
        labels = rng.integers(0, 2, 100)
        labels[:2] = [0, 1]
        col = labels.astype(float)
        features = np.column_stack([col, np.full(100, 0.5), np.full(100, 0.5)])
        meta = MetaFeatureMatrix(features, labels, tuple(f"s{i}" for i in range(100)),
                                 ("p_rf", "p_lgbm", "p_dnn"))
        small = fit_logistic(meta, reg_lambda=1e-4)
        large = fit_logistic(meta, reg_lambda=1.0)
        assert small.coefficients[0] > large.coefficients[0] > 0
        preds = predict_meta(small, features) >= 0.5
        assert (preds == labels.astype(bool)).mean() == 1.0

    def test_independent_labels_give_near_zero_coefficients(self):
        rng = np.random.default_rng(1)
        features = rng.random((300, 3))
        labels = rng.integers(0, 2, 300)
        labels[:150] = 0
        labels[150:] = 1
        labels = rng.permutation(labels)
        meta = MetaFeatureMatrix(features, labels, tuple(f"s{i}" for i in range(300)),
                                 ("p_rf", "p_lgbm", "p_dnn"))
        model = fit_logistic(meta, reg_lambda=1.0)
        assert np.all(np.abs(model.coefficients) <= 0.1 + 0.35)  # loose null band
        probs = predict_meta(model, features)
        assert np.all(np.abs(probs - 0.5) < 0.2)

    def test_huge_penalty_shrinks_to_intercept_model(self):
        rng = np.random.default_rng(2)
        features = rng.random((200, 3))
        labels = (rng.random(200) < 0.3).astype(int)
        labels[:2] = [0, 1]
        meta = MetaFeatureMatrix(features, labels, tuple(f"s{i}" for i in range(200)),
                                 ("p_rf", "p_lgbm", "p_dnn"))
        model = fit_logistic(meta, reg_lambda=1e6)
        assert np.all(np.abs(model.coefficients) < 1e-3)
        base_rate = labels.mean()
        assert model.intercept == pytest.approx(np.log(base_rate / (1 - base_rate)), abs=1e-2)

    def test_gradient_sup_norm_below_tolerance(self):
        rng = np.random.default_rng(3)
        features = np.clip(rng.random((80, 3)), 0, 1)
        labels = (features[:, 0] + 0.3 * rng.random(80) > 0.6).astype(int)
        labels[:2] = [0, 1]
        meta = MetaFeatureMatrix(features, labels, tuple(f"s{i}" for i in range(80)),
                                 ("p_rf", "p_lgbm", "p_dnn"))
        model = fit_logistic(meta, reg_lambda=0.5)
        assert model.converged
        assert model.grad_norm <= 1e-8

    def test_matches_grid_maximizer_on_1feature_toys(self):
        rng = np.random.default_rng(4)
        for trial in range(5):
            n = 40
            x = rng.random(n)
            labels = (x + rng.normal(0, 0.3, n) > 0.5).astype(int)
            labels[:2] = [0, 1]
            lam = float(rng.choice([0.1, 0.5, 1.0]))
            fitted = fit_logistic_array(x[:, None], labels, lam)
            oracle = grid_maximize_1feature(x, labels, lam)
            assert fitted.intercept == pytest.approx(oracle[0], abs=1e-3)
            assert fitted.coefficients[0] == pytest.approx(oracle[1], abs=1e-3)

    def test_single_label_rejected(self):
        with pytest.raises(ValueError):
            fit_logistic_array(np.random.random((5, 1)), np.ones(5), 1.0)


class TestPredictMeta:
    def test_zero_model_outputs_half(self):
        model = LogisticModel(intercept=0.0, coefficients=np.zeros(3), reg_lambda=1.0)
        assert predict_meta(model, [0.1, 0.9, 0.4]) == 0.5

    def test_sigmoid_of_weighted_sum(self):
        model = LogisticModel(intercept=0.0, coefficients=np.ones(3), reg_lambda=1.0)
        out = predict_meta(model, [0.5, 0.5, 0.5])
        assert out == pytest.approx(1 / (1 + np.exp(-1.5)), abs=1e-12)
        assert round(float(out), 4) == 0.8176

    def test_monotone_in_positive_coefficients(self):
        model = LogisticModel(intercept=-0.3, coefficients=np.array([2.0, 1.0, 0.5]),
                              reg_lambda=1.0)
        lo = predict_meta(model, [0.2, 0.5, 0.5])
        hi = predict_meta(model, [0.9, 0.5, 0.5])
        assert hi > lo

    def test_always_strictly_inside_unit_interval(self):
        model = LogisticModel(intercept=500.0, coefficients=np.array([500.0, 0.0, 0.0]),
                              reg_lambda=0.0)
        hi = predict_meta(model, [1.0, 1.0, 1.0])
        lo = predict_meta(LogisticModel(-500.0, np.zeros(3), 0.0), [0.0, 0.0, 0.0])
        assert 0.0 < lo < hi < 1.0

    def test_batch_rows(self):
        model = LogisticModel(intercept=0.0, coefficients=np.ones(3), reg_lambda=1.0)
        out = predict_meta(model, np.array([[0.5, 0.5, 0.5], [0.0, 0.0, 0.0]]))
        assert out.shape == (2,)
        assert out[1] == 0.5


class TestRefitAndPredict:
    def _train_and_meta(self, rng):
        data = planted_dataset(rng, n=50, p=8)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(0))
        oof = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(1))
        return data, fit_logistic(oof, 1.0)

    def test_fingerprint_mismatch_rejected(self, rng):
        data, meta = self._train_and_meta(rng)
        train = make_dataset(data.features.to_dense(), data.labels, fingerprint="aaa")
        test = make_dataset(data.features.to_dense(), data.labels, fingerprint="bbb")
        with pytest.raises(ValueError, match="fingerprint"):
            refit_and_predict(train, test, FAST_LEARNERS, meta, RngPlan(2))

    def test_empty_test_set_gives_empty_output(self, rng):
        data, meta = self._train_and_meta(rng)
        empty = data.subset([])
        probs, base = refit_and_predict(data, empty, FAST_LEARNERS, meta, RngPlan(2))
        assert probs.size == 0
        assert all(v.size == 0 for v in base.values())

    def test_diagnostic_mode_scores_training_data(self, rng):
        # test == train is allowed; it measures in-sample fit only
        data, meta = self._train_and_meta(rng)
        probs, base = refit_and_predict(data, data, FAST_LEARNERS, meta, RngPlan(2))
        assert probs.shape == (50,)
        assert set(base) == {"rf", "lgbm", "dnn"}
        acc = ((probs >= 0.5).astype(int) == data.labels).mean()
        assert acc >= 0.8

    def test_fold_model_averaging_path(self, rng):
        data = planted_dataset(rng, n=50, p=8)
        folds = stratified_kfold(data.labels, 3, np.random.default_rng(0))
        oof, fold_models = build_oof_matrix(data, folds, FAST_LEARNERS, RngPlan(1),
                                            return_models=True)
        meta = fit_logistic(oof, 1.0)
        probs, base = refit_and_predict(data, data, FAST_LEARNERS, meta, RngPlan(2),
                                        fold_models=fold_models)
        assert probs.shape == (50,)
        assert np.all((probs > 0) & (probs < 1))
