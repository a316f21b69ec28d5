import numpy as np
import pytest

from mmdcnn.autodiff import Tensor, backward
from mmdcnn.data import Batch
from mmdcnn.losses import categorical_cross_entropy
from mmdcnn.model import ModelConfig, apply_max_norm, build_model
from mmdcnn.training import (
    AdamState,
    ArrayDatasets,
    MetricsRecord,
    TrainConfig,
    TrainingError,
    adam_step,
    evaluate,
    fit,
    init_adam,
    train_epoch,
)

from oracles import AdamScalar

SMALL_CFG = ModelConfig(conv_filters=(2,), feature_units=4, image_side=8)


def _small_data(seed=0, n_source=12, n_target=10):
    rng = np.random.default_rng(seed)
    shape = (8, 8, 3)
    src = rng.random((n_source, *shape))
    src_y = np.eye(2)[rng.integers(0, 2, size=n_source)]
    tgt = rng.random((n_target, *shape))
    tgt_y = np.eye(2)[rng.integers(0, 2, size=n_target)]
    return ArrayDatasets(src, src_y, tgt, tgt, tgt_y)


class TestTrainConfig:
    def test_defaults_match_published_setup(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 0.0005
        assert cfg.batch_size == 16
        assert (cfg.beta1, cfg.beta2, cfg.epsilon) == (0.9, 0.999, 1e-8)

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"beta1": 1.0},
        {"batch_size": 0},
        {"epochs": 0},
        {"adapt_on": "sometimes"},
        {"estimator": "jackknife"},
        {"dtype": "float16"},
        {"max_norm_cap": -1.0},
    ])
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestAdam:
    def test_zero_gradient_leaves_params_unchanged(self):
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        params = {"w": p}
        state = init_adam(params)
        adam_step(params, {"w": np.zeros(3)}, state, TrainConfig())
        np.testing.assert_array_equal(p.data, [1.0, -2.0, 3.0])
        assert state.t == 1

    def test_single_step_hand_value(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        params = {"w": p}
        adam_step(params, {"w": np.array([0.5])}, init_adam(params), TrainConfig())
        assert p.data[0] == pytest.approx(-0.000499999990, abs=1e-12)

    def test_ten_steps_on_quadratic_match_scalar_oracle(self):
        cfg = TrainConfig()
        p = Tensor(np.array([1.0]), requires_grad=True)
        params = {"w": p}
        state = init_adam(params)
        oracle = AdamScalar(lr=cfg.learning_rate, beta1=cfg.beta1,
                            beta2=cfg.beta2, eps=cfg.epsilon)
        theta = 1.0
        for _ in range(10):
            g = 2.0 * p.data[0]
            adam_step(params, {"w": np.array([g])}, state, cfg)
            theta = oracle.step(theta, 2.0 * theta)
            assert p.data[0] == pytest.approx(theta, abs=1e-12)

    def test_vectorized_matches_scalar_oracle_coordinatewise(self):
        cfg = TrainConfig(learning_rate=0.003)
        rng = np.random.default_rng(0)
        shape = (4, 3)
        p = Tensor(rng.normal(size=shape), requires_grad=True)
        params = {"w": p}
        state = init_adam(params)
        oracles = [AdamScalar(lr=cfg.learning_rate) for _ in range(p.size)]
        thetas = p.data.copy().ravel()
        for _ in range(50):
            g = rng.normal(size=shape)
            adam_step(params, {"w": g}, state, cfg)
            for i, o in enumerate(oracles):
                thetas[i] = o.step(thetas[i], g.ravel()[i])
            np.testing.assert_allclose(p.data.ravel(), thetas, atol=1e-12, rtol=0)

    def test_non_finite_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        params = {"conv1/W": p}
        with pytest.raises(TrainingError, match="conv1/W"):
            adam_step(params, {"conv1/W": np.array([np.nan])}, init_adam(params), TrainConfig())

    def test_missing_gradient_aborts_with_name(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        params = {"head/b": p}
        with pytest.raises(TrainingError, match="head/b"):
            adam_step(params, {}, init_adam(params), TrainConfig())


class _FixedModel:
    """Stub with a predetermined probability table, for evaluate() tests."""

    def __init__(self, probs):
        self.probs = np.asarray(probs)

    def forward(self, images, mode="eval", rng=None):
        n = images.shape[0]
        return None, Tensor(self.probs[:n])


def _labeled_batch(probs_rows, labels_rows):
    n = len(labels_rows)
    images = Tensor(np.zeros((n, 2, 2, 3)) + 0.5)
    return Batch(images=images, labels=Tensor(np.asarray(labels_rows, dtype=float)),
                 domain="target")


class TestEvaluate:
    def test_all_correct(self):
        model = _FixedModel([[0.9, 0.1], [0.2, 0.8]])
        batch = _labeled_batch(None, [[1, 0], [0, 1]])
        loss, acc = evaluate(model, [batch])
        assert acc == 1.0

    def test_tie_breaks_toward_lower_class(self):
        model = _FixedModel([[0.5, 0.5]] * 4)
        batch = _labeled_batch(None, [[1, 0], [0, 1], [1, 0], [0, 1]])
        _, acc = evaluate(model, [batch])
        assert acc == 0.5

    def test_three_of_four(self):
        model = _FixedModel([[0.9, 0.1], [0.9, 0.1], [0.1, 0.9], [0.9, 0.1]])
        batch = _labeled_batch(None, [[1, 0], [1, 0], [0, 1], [0, 1]])
        _, acc = evaluate(model, [batch])
        assert acc == 0.75

    def test_empty_stream_rejected(self):
        with pytest.raises(ValueError):
            evaluate(_FixedModel([[0.5, 0.5]]), [])

    def test_mean_loss_weighted_by_batch_size(self):
        model = _FixedModel([[0.9, 0.1], [0.9, 0.1], [0.9, 0.1]])
        b1 = _labeled_batch(None, [[1, 0], [1, 0]])
        b2 = _labeled_batch(None, [[0, 1]])
        loss, _ = evaluate(model, [b1, b2])
        expected = (2 * (-np.log(0.9)) + (-np.log(0.1))) / 3
        assert loss == pytest.approx(expected, abs=1e-12)


class TestTrainEpoch:
    def test_off_mode_equals_plain_supervised_step(self):
        data = _small_data()
        cfg = TrainConfig(adapt_on="off", batch_size=16, epochs=1, seed=3)

        model_a = build_model(SMALL_CFG, seed=1)
        stream = data.source_train_batches(16, cfg.seed, 0)
        rng_a = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, 1)))
        train_epoch(model_a, stream, None, cfg, 0.0, rng_a)

        model_b = build_model(SMALL_CFG, seed=1)
        state = init_adam(model_b.params)
        rng_b = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0, 1)))
        for batch in data.source_train_batches(16, cfg.seed, 0):
            rng_src, _ = rng_b.spawn(2)
            _, probs = model_b.forward(batch.images, mode="train", rng=rng_src)
            loss = categorical_cross_entropy(probs, batch.labels)
            model_b.zero_grad()
            backward(loss)
            grads = {n: p.grad for n, p in model_b.params.items()}
            adam_step(model_b.params, grads, state, cfg)
            for name in model_b.constrained:
                apply_max_norm(model_b.params[name], cfg.max_norm_cap)

        for name in model_a.params:
            assert np.array_equal(model_a.params[name].data, model_b.params[name].data), name

    def test_zero_lambda_matches_off_bitwise(self):
        data = _small_data(7)
        cfg_off = TrainConfig(adapt_on="off", batch_size=8, seed=5)
        cfg_adapt = TrainConfig(adapt_on="features", batch_size=8, seed=5)

        model_off = build_model(SMALL_CFG, seed=2)
        rng = np.random.default_rng(np.random.SeedSequence((5, 0, 1)))
        train_epoch(model_off, data.source_train_batches(8, 5, 0), None, cfg_off, 0.0, rng)

        model_adapt = build_model(SMALL_CFG, seed=2)
        rng = np.random.default_rng(np.random.SeedSequence((5, 0, 1)))
        train_epoch(model_adapt, data.source_train_batches(8, 5, 0),
                    data.target_train_batches(8, 5, 0), cfg_adapt, 0.0, rng)

        for name in model_off.params:
            assert np.array_equal(model_off.params[name].data,
                                  model_adapt.params[name].data), name

    def test_target_stream_cycles(self):
        data = _small_data(11, n_source=12, n_target=4)
        cfg = TrainConfig(adapt_on="features", batch_size=4, seed=0)
        model = build_model(SMALL_CFG, seed=0)
        rng = np.random.default_rng(0)
        report = train_epoch(model, data.source_train_batches(4, 0, 0),
                             data.target_train_batches(4, 0, 0), cfg, 0.5, rng)
        assert report.mmd_value >= 0.0

    def test_empty_source_stream_rejected(self):
        cfg = TrainConfig(adapt_on="off")
        model = build_model(SMALL_CFG, seed=0)
        with pytest.raises(TrainingError, match="empty"):
            train_epoch(model, [], None, cfg, 0.0, np.random.default_rng(0))

    def test_oversized_batch_rejected(self):
        data = _small_data()
        cfg = TrainConfig(adapt_on="off", batch_size=4)
        model = build_model(SMALL_CFG, seed=0)
        stream = data.source_train_batches(12, 0, 0)  # bigger than cfg.batch_size
        with pytest.raises(TrainingError, match="exceeds"):
            train_epoch(model, stream, None, cfg, 0.0, np.random.default_rng(0))

    def test_epoch_mean_composition(self):
        data = _small_data(13)
        cfg = TrainConfig(adapt_on="features", batch_size=8, seed=1)
        model = build_model(SMALL_CFG, seed=4)
        rng = np.random.default_rng(1)
        lam = 0.25
        report = train_epoch(model, data.source_train_batches(8, 1, 0),
                             data.target_train_batches(8, 1, 0), cfg, lam, rng)
        assert report.total == report.ce_loss + lam * report.mmd_value
        assert report.lambda_ == lam


class TestFit:
    def test_single_epoch_schedule_starts_at_zero(self):
        data = _small_data(17)
        cfg = TrainConfig(adapt_on="features", batch_size=8, epochs=1, seed=0)
        records = fit(build_model(SMALL_CFG, seed=0), data, cfg)
        assert len(records) == 1
        assert records[0].lambda_ == 0.0
        assert records[0].epoch == 0

    def test_lambda_column_non_decreasing(self):
        data = _small_data(19)
        cfg = TrainConfig(adapt_on="features", batch_size=8, epochs=5, seed=0)
        records = fit(build_model(SMALL_CFG, seed=0), data, cfg)
        lambdas = [r.lambda_ for r in records]
        assert lambdas[0] == 0.0
        assert all(a <= b for a, b in zip(lambdas, lambdas[1:]))

    def test_metrics_are_finite_and_bounded(self):
        data = _small_data(23)
        cfg = TrainConfig(adapt_on="features", batch_size=8, epochs=3, seed=0)
        records = fit(build_model(SMALL_CFG, seed=0), data, cfg)
        for r in records:
            assert np.isfinite([r.train_loss, r.test_loss, r.mmd_value]).all()
            assert 0.0 <= r.train_accuracy <= 1.0
            assert 0.0 <= r.test_accuracy <= 1.0
            assert r.wall_seconds >= 0.0

    def test_seed_determinism_across_runs(self):
        def run():
            data = _small_data(29)
            cfg = TrainConfig(adapt_on="features", batch_size=8, epochs=3, seed=9)
            records = fit(build_model(SMALL_CFG, seed=9), data, cfg)
            return [(r.epoch, r.train_loss, r.train_accuracy, r.test_loss,
                     r.test_accuracy, r.lambda_, r.mmd_value) for r in records]

        assert run() == run()

    def test_baseline_identity_zero_lambda_max(self):
        def run(adapt_on, lambda_max):
            data = _small_data(31)
            cfg = TrainConfig(adapt_on=adapt_on, lambda_max=lambda_max,
                              batch_size=8, epochs=3, seed=2)
            model = build_model(SMALL_CFG, seed=2)
            fit(model, data, cfg)
            return {n: p.data.copy() for n, p in model.params.items()}

        off = run("off", 1.0)
        zeroed = run("features", 0.0)
        for name in off:
            assert np.array_equal(off[name], zeroed[name]), name

    def test_max_norm_enforced_after_every_step(self):
        data = _small_data(37)
        cfg = TrainConfig(adapt_on="off", batch_size=8, epochs=2, seed=0,
                          max_norm_cap=0.5, learning_rate=0.05)
        model = build_model(SMALL_CFG, seed=0)
        fit(model, data, cfg)
        for name in model.constrained:
            norms = np.sqrt((model.params[name].data ** 2).sum(axis=0))
            assert (norms <= 0.5 + 1e-9).all()
