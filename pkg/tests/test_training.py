"""Optimizer arithmetic and training-loop behavior."""

import csv

import numpy as np
import pytest

from uwbrem import model, training
from uwbrem.model import ModelWeights
from uwbrem.rng import Rng

TINY = model.RemnetConfig(input_len=16, filters=4, blocks=2, se_reduction=2,
                          dropout_rate=0.1)


def _scalar_weights(value=0.0):
    return ModelWeights([("w", np.array([value]))])


def test_adam_constant_gradient_closed_form():
    # with a constant gradient g, bias-corrected moments are exactly g and
    # g^2 at every step, so each update is lr * g / (|g| + eps)
    plan = training.TrainPlan(learning_rate=0.1, epsilon=1e-8)
    w = _scalar_weights(0.0)
    state = training.AdamState(w)
    g = 0.7
    expected = 0.0
    for t in range(1, 6):
        training.adam_step(w, _scalar_weights(g), state, plan)
        expected -= 0.1 * g / (abs(g) + 1e-8)
        assert state.t == t
        np.testing.assert_allclose(w["w"][0], expected, rtol=1e-12)


def test_adam_step_magnitude_bounded_by_lr():
    plan = training.TrainPlan(learning_rate=0.01)
    rng = Rng(1)
    w = ModelWeights([("w", np.zeros(50))])
    state = training.AdamState(w)
    for _ in range(20):
        grads = ModelWeights([("w", rng.normals(50, std=5.0))])
        before = w["w"].copy()
        training.adam_step(w, grads, state, plan)
        # |step| <= lr * bc-corrected bound; loose factor for early steps
        assert np.max(np.abs(w["w"] - before)) < 0.011


def test_adam_zero_betas_is_sign_scaled_sgd():
    # beta1 = beta2 = 0 kills both moments' memory: each update is
    # lr * g / (|g| + eps), i.e. sign-scaled SGD
    plan = training.TrainPlan(learning_rate=0.01, beta1=0.0, beta2=0.0)
    w = _scalar_weights(1.0)
    state = training.AdamState(w)
    for g in (0.3, -2.0, 5.0):
        before = float(w["w"][0])
        training.adam_step(w, _scalar_weights(g), state, plan)
        assert abs((float(w["w"][0]) - before) + 0.01 * np.sign(g)) < 1e-6


def test_adam_quadratic_bowl_converges_monotonically():
    plan = training.TrainPlan(learning_rate=3e-4)
    target = np.array([0.3, -0.5])
    curv = np.array([2.0, 0.5])
    w = ModelWeights([("w", np.zeros(2))])
    state = training.AdamState(w)
    dists = []
    for _ in range(500):
        g = curv * (w["w"] - target)
        training.adam_step(w, ModelWeights([("w", g.copy())]), state, plan)
        dists.append(float(np.linalg.norm(w["w"] - target)))
    tail = dists[100:]  # after burn-in
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert tail[-1] < dists[0]


def test_adam_rejects_non_finite_gradients():
    plan = training.TrainPlan()
    w = _scalar_weights(0.0)
    state = training.AdamState(w)
    with pytest.raises(training.NonFiniteError):
        training.adam_step(w, _scalar_weights(float("nan")), state, plan)


def test_plan_validation():
    for bad in (dict(epochs=-1), dict(batch_size=0), dict(learning_rate=0.0),
                dict(beta1=1.0), dict(loss="mse")):
        with pytest.raises(ValueError):
            training.TrainPlan(**bad).validate()


def _toy_problem(n=48, cfg=TINY, seed=0):
    rng = Rng(seed)
    x = rng.uniform_array((n, cfg.input_len))
    y = x[:, :4].sum(axis=1) * 0.1
    return x, y


def test_fit_deterministic_and_seed_sensitive():
    cfg = TINY
    x, y = _toy_problem()
    w0 = model.build(cfg, Rng(2))
    plan = training.TrainPlan(epochs=2, batch_size=16, shuffle_seed=5,
                              dropout_seed=6)
    r1 = training.fit(cfg, w0, x, y, plan)
    r2 = training.fit(cfg, w0, x, y, plan)
    for name, arr in r1.weights.items():
        np.testing.assert_array_equal(arr, r2.weights[name])
    assert [s.train_mae for s in r1.history] == [s.train_mae for s in r2.history]

    other = training.TrainPlan(epochs=2, batch_size=16, shuffle_seed=7,
                               dropout_seed=6)
    r3 = training.fit(cfg, w0, x, y, other)
    assert any(np.any(r1.weights[name] != r3.weights[name])
               for name, _ in r1.weights.items())


def test_fit_zero_epochs_returns_copy():
    cfg = TINY
    x, y = _toy_problem()
    w0 = model.build(cfg, Rng(3))
    result = training.fit(cfg, w0, x, y, training.TrainPlan(epochs=0))
    assert result.history == []
    for name, arr in w0.items():
        np.testing.assert_array_equal(result.weights[name], arr)
    result.weights["head.b"][0] = 5.0  # trained weights are a copy
    assert w0["head.b"][0] != 5.0


def test_fit_reduces_training_loss():
    cfg = model.RemnetConfig(input_len=16, filters=4, blocks=2,
                             se_reduction=2, dropout_rate=0.0)
    x, y = _toy_problem(cfg=cfg)
    w0 = model.build(cfg, Rng(4))
    plan = training.TrainPlan(epochs=25, batch_size=16, learning_rate=3e-3)
    result = training.fit(cfg, w0, x, y, plan)
    assert result.history[-1].train_mae < 0.5 * result.history[0].train_mae


def test_fit_validation_and_log(tmp_path):
    cfg = TINY
    x, y = _toy_problem()
    w0 = model.build(cfg, Rng(5))
    log = tmp_path / "log.csv"
    result = training.fit(cfg, w0, x[:32], y[:32],
                          training.TrainPlan(epochs=3, batch_size=8),
                          x_val=x[32:], y_val=y[32:], log_path=log)
    assert all(np.isfinite(s.val_mae) for s in result.history)
    rows = list(csv.reader(log.open()))
    assert rows[0] == ["epoch", "train_mae", "val_mae", "wall_ms"]
    assert len(rows) == 4
    np.testing.assert_allclose(float(rows[1][1]), result.history[0].train_mae,
                               atol=1e-9)


def test_fit_last_short_batch_used():
    # 10 samples, batch 4 -> batches of 4, 4, 2; epoch mean weights by size
    cfg = TINY
    x, y = _toy_problem(n=10)
    w0 = model.build(cfg, Rng(6))
    seen = []
    real = model.mae_loss_and_grads

    def spy(cfg_, w_, xb, yb, **kw):
        seen.append(len(xb))
        return real(cfg_, w_, xb, yb, **kw)

    import uwbrem.training as tr
    orig = tr.model_mod.mae_loss_and_grads
    tr.model_mod.mae_loss_and_grads = spy
    try:
        training.fit(cfg, w0, x, y, training.TrainPlan(epochs=1, batch_size=4))
    finally:
        tr.model_mod.mae_loss_and_grads = orig
    assert sorted(seen) == [2, 4, 4]


def test_fit_rejects_bad_shapes():
    cfg = TINY
    w0 = model.build(cfg, Rng(7))
    with pytest.raises(ValueError):
        training.fit(cfg, w0, np.zeros((0, cfg.input_len)), np.zeros(0),
                     training.TrainPlan(epochs=1))
    with pytest.raises(ValueError):
        training.fit(cfg, w0, np.zeros((4, cfg.input_len)), np.zeros(5),
                     training.TrainPlan(epochs=1))


def test_fit_loop_raises_on_non_finite_loss():
    w = ModelWeights([("w", np.zeros(1))])

    def bad_grads(weights, xb, yb, rng):
        return float("inf"), weights.zeros_like()

    with pytest.raises(training.DivergenceError):
        training.fit_loop(bad_grads, w, np.zeros((4, 1)), np.zeros(4),
                          training.TrainPlan(epochs=1))


def test_fit_raises_on_non_finite_input():
    cfg = TINY
    x, y = _toy_problem()
    x[0, 0] = float("nan")
    w0 = model.build(cfg, Rng(8))
    with pytest.raises(training.NonFiniteError):
        training.fit(cfg, w0, x, y, training.TrainPlan(epochs=1))


def test_fit_mlp_learns_linear_map():
    rng = Rng(9)
    x = rng.uniform_array((64, 6))
    y = x @ np.array([0.3, -0.2, 0.1, 0.0, 0.25, -0.15])
    cfg = model.MlpConfig(input_dim=6, hidden=16, layers=2)
    w0 = model.build_mlp(cfg, Rng(10))
    plan = training.TrainPlan(epochs=200, batch_size=16, learning_rate=3e-3)
    result = training.fit_mlp(cfg, w0, x, y, plan)
    assert result.history[-1].train_mae < 0.02
