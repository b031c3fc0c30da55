import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bubbledetect import mlp
from bubbledetect.errors import (ConstructionError, FormatError, TrainingError,
                                 WidthMismatchError)


def gradient_ok(analytic, numeric, rel=1e-4, floor=1e-8):
    return abs(analytic - numeric) <= max(rel * max(abs(analytic), abs(numeric)), floor)


def toy_problem(n=200, width=6, seed=0):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, width))
    labels = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int)
    defects = np.where(labels == 1, np.abs(x[:, 2]), 0.0)
    return x, labels, defects


class TestInit:
    def test_parameter_count(self):
        model = mlp.init((5100, 128, 64), seed=0)
        assert model.n_params == mlp.parameter_count((5100, 128, 64))
        assert model.n_params == 5101 * 128 + 129 * 64 + 65 * 2 + 65

    def test_deterministic(self):
        a, b = mlp.init((7, 5, 3), seed=4), mlp.init((7, 5, 3), seed=4)
        for k in mlp.LAYERS:
            assert a.params[k].tobytes() == b.params[k].tobytes()
        c = mlp.init((7, 5, 3), seed=5)
        assert a.params["W1"].tobytes() != c.params["W1"].tobytes()

    def test_bad_dims(self):
        for dims in [(3, 2), (3, 0, 2)]:
            with pytest.raises(ConstructionError):
                mlp.init(dims)

    def test_config_validation(self):
        with pytest.raises(ConstructionError):
            mlp.TrainConfig(learning_rate=0)
        with pytest.raises(ConstructionError):
            mlp.TrainConfig(beta1=1.0)
        with pytest.raises(ConstructionError):
            mlp.TrainConfig(batch_size=0)

    def test_config_round_trip(self):
        cfg = mlp.TrainConfig(lam=0.3, hidden=(8, 4))
        assert mlp.TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_zero_weights_give_half(self):
        model = mlp.init((4, 3, 2))
        for k in model.params:
            model.params[k][:] = 0.0
        p = mlp.predict_bubble_probability(model, np.ones((3, 4)))
        np.testing.assert_array_equal(p, 0.5)

    def test_zero_weights_loss_is_ln2(self):
        model = mlp.init((4, 3, 2))
        for k in model.params:
            model.params[k][:] = 0.0
        loss, _ = mlp.loss_and_gradients(model, np.ones((2, 4)), [0, 1], lam=0.0)
        assert loss == pytest.approx(np.log(2), abs=1e-15)

    def test_confident_correct_loss_is_zero(self):
        model = mlp.init((2, 2, 2))
        for k in model.params:
            model.params[k][:] = 0.0
        model.params["bc"][:] = [0.0, 800.0]
        loss, _ = mlp.loss_and_gradients(model, np.ones((1, 2)), [1], lam=0.0)
        assert loss == 0.0

    @settings(max_examples=25)
    @given(st.integers(0, 1000))
    def test_probabilities_sum_to_one(self, seed):
        model = mlp.init((5, 4, 3), seed=seed)
        x = np.random.default_rng(seed).normal(scale=50, size=(6, 5))
        probs, _ = mlp.forward(model, x)
        assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-12)
        assert np.all(np.isfinite(probs))

    def test_width_mismatch(self):
        with pytest.raises(WidthMismatchError):
            mlp.predict(mlp.init((4, 3, 2)), np.ones((1, 5)))


class TestGradients:
    @settings(max_examples=10)
    @given(st.integers(0, 10_000))
    def test_finite_differences(self, seed):
        gen = np.random.default_rng(seed)
        model = mlp.init((6, 5, 4), seed=seed)
        # zero biases put dead rows exactly on the ReLU kink
        for k in ("b1", "b2", "bc", "bd"):
            model.params[k][:] = gen.normal(scale=0.1, size=model.params[k].shape)
        x = gen.normal(size=(8, 6))
        labels = gen.integers(0, 2, 8)
        defects = gen.random(8)
        checks = mlp.gradient_check(model, x, labels, defects, lam=0.5, seed=seed, n_coords=60)
        assert all(gradient_ok(a, n) for _, _, a, n in checks)

    def test_defect_head_only(self):
        model = mlp.init((3, 4, 4), seed=2)
        x, labels, defects = toy_problem(5, 3)
        _, grads = mlp.loss_and_gradients(model, x, labels, defects, lam=1.0, ce_weight=0.0)
        assert np.all(grads["Wc"] == 0) and np.all(grads["bc"] == 0)


class TestAdam:
    def test_first_step_scalar_oracle(self):
        model = mlp.init((1, 1, 1))
        grads = {k: np.ones_like(v) for k, v in model.params.items()}
        before = {k: v.copy() for k, v in model.params.items()}
        mlp.adam_step(model, grads, mlp.TrainConfig(), 1)
        # m_hat = v_hat = 1 after bias correction
        expected = -0.001 / (1 + 1e-8)
        for k in mlp.LAYERS:
            np.testing.assert_allclose(model.params[k] - before[k], expected, rtol=1e-12)

    def test_zero_gradient_leaves_parameters(self):
        model = mlp.init((3, 2, 2), seed=1)
        before = {k: v.copy() for k, v in model.params.items()}
        grads = {k: np.zeros_like(v) for k, v in model.params.items()}
        mlp.adam_step(model, grads, mlp.TrainConfig(), 1)
        for k in mlp.LAYERS:
            np.testing.assert_array_equal(model.params[k], before[k])

    def test_step_counter(self):
        model = mlp.init((1, 1, 1))
        with pytest.raises(ConstructionError):
            mlp.adam_step(model, {k: 0 * v for k, v in model.params.items()},
                          mlp.TrainConfig(), 0)


class TestTraining:
    def test_loss_decreases(self):
        x, labels, defects = toy_problem()
        cfg = mlp.TrainConfig(epochs=30, batch_size=32, hidden=(16, 8), learning_rate=1e-2)
        model, history = mlp.train(x, labels, defects, cfg)
        assert history[-1]["loss"] < history[0]["loss"]
        assert mlp.accuracy_of(model, x, labels) > 0.9

    def test_row_order_does_not_matter(self):
        x, labels, defects = toy_problem(64)
        cfg = mlp.TrainConfig(epochs=3, batch_size=16, hidden=(8, 4))
        a, _ = mlp.train(x, labels, defects, cfg)
        perm = np.random.default_rng(1).permutation(64)
        b, _ = mlp.train(x[perm], labels[perm], defects[perm], cfg)
        for k in mlp.LAYERS:
            assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_standardized_and_twin(self):
        x, labels, defects = toy_problem(64)
        cfg = mlp.TrainConfig(epochs=2, batch_size=16, hidden=(8, 4), standardize=True,
                              shared_trunk=False)
        model, history = mlp.train(x * 100 + 5, labels, defects, cfg)
        assert isinstance(model, mlp.TwinModel)
        assert "defect_loss" in history[0]
        p, m = mlp.predict(model, x[:3] * 100 + 5)
        assert p.shape == (3,) and m.shape == (3,)

    def test_nan_input_is_a_training_error(self):
        x, labels, defects = toy_problem(32)
        x[5, 0] = np.nan
        with pytest.raises(TrainingError):
            mlp.train(x, labels, defects, mlp.TrainConfig(epochs=1, hidden=(4, 4)))

    def test_empty(self):
        with pytest.raises(ConstructionError):
            mlp.train(np.zeros((0, 3)), [], None)


class TestWeightFiles:
    def test_round_trip(self, tmp_path):
        x, labels, defects = toy_problem(32)
        model, _ = mlp.train(x, labels, defects,
                             mlp.TrainConfig(epochs=1, hidden=(4, 3), standardize=True))
        back = mlp.load_weights(mlp.save_weights(model, tmp_path / "w.bin"))
        np.testing.assert_array_equal(mlp.predict(back, x)[0], mlp.predict(model, x)[0])
        assert back.config == model.config

    def test_twin_round_trip(self, tmp_path):
        x, labels, defects = toy_problem(32)
        model, _ = mlp.train(x, labels, defects,
                             mlp.TrainConfig(epochs=1, hidden=(4, 3), shared_trunk=False))
        back = mlp.load_weights(mlp.save_weights(model, tmp_path / "w.bin"))
        assert isinstance(back, mlp.TwinModel)
        np.testing.assert_array_equal(mlp.predict(back, x)[1], mlp.predict(model, x)[1])

    def test_corruption_detected(self, tmp_path):
        path = mlp.save_weights(mlp.init((3, 2, 2)), tmp_path / "w.bin")
        raw = bytearray(path.read_bytes())
        raw[-10] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            mlp.load_weights(path)

    def test_not_weights(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"BDDS" + bytes(40))
        with pytest.raises(FormatError):
            mlp.load_weights(path)
