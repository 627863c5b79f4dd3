import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inputtune.perf_model import (
    MlpArchitecture,
    ModelFormatError,
    PerfModel,
    TrainConfig,
    TrainingDiverged,
    backward,
    evaluate,
    forward,
    init_weights,
    load_model,
    save_model,
    train,
)
from oracles import finite_difference, mlp_forward_loops


def random_net(hidden, input_dim, seed):
    rng = np.random.default_rng(seed)
    w = init_weights(MlpArchitecture(tuple(hidden), input_dim), rng)
    return [(W, rng.normal(0, 0.3, size=b.shape)) for W, b in w]


def rel_err(a, b):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-7)


# ---- forward


def test_zero_weights_predict_zero():
    w = [(np.zeros((4, 3)), np.zeros(4)), (np.zeros((1, 4)), np.zeros(1))]
    assert forward(w, [1.0, 5.0, 7.0]) == 0.0


def test_hand_evaluated_forward():
    w = [(np.array([[1.0, -1.0]]), np.zeros(1)), (np.array([[1.0]]), np.zeros(1))]
    assert forward(w, [math.e**2, math.e]) == pytest.approx(1.0, abs=1e-12)
    assert forward(w, [math.e, math.e**2]) == 0.0


def test_output_layer_is_linear():
    w = [(np.array([[1.0]]), np.zeros(1)), (np.array([[-1.0]]), np.zeros(1))]
    assert forward(w, [math.e**3]) == pytest.approx(-3.0)


def test_forward_rejects_non_positive_features():
    w = random_net([3], 2, 0)
    with pytest.raises(ValueError):
        forward(w, [1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.lists(st.integers(1, 6), min_size=1, max_size=4))
def test_forward_matches_loop_oracle(seed, hidden):
    w = random_net(hidden, 3, seed)
    x = np.random.default_rng(seed).uniform(0.5, 100, size=3)
    assert forward(w, x) == pytest.approx(mlp_forward_loops(w, x), rel=1e-10, abs=1e-10)


# ---- backward


@pytest.mark.parametrize("hidden", [[4], [3, 5], [4, 3, 5, 3, 4]])
def test_gradient_matches_finite_differences(hidden):
    w = random_net(hidden, 3, len(hidden))
    rng = np.random.default_rng(10)
    X = rng.uniform(0.5, 20, size=(6, 3))
    y = rng.normal(size=6)
    analytic = backward(w, X, y)
    numeric = finite_difference(w, X, y)
    for (gW, gb), (nW, nb) in zip(analytic, numeric):
        assert gW.shape == nW.shape and gb.shape == nb.shape
        assert rel_err(gW, nW).max() < 1e-4
        assert rel_err(gb, nb).max() < 1e-4


def test_perfect_predictions_give_zero_gradient():
    w = random_net([4, 4], 2, 1)
    X = np.array([[2.0, 3.0], [5.0, 1.5]])
    y = [forward(w, x) for x in X]
    for gW, gb in backward(w, X, y):
        assert np.allclose(gW, 0) and np.allclose(gb, 0)


def test_output_bias_gradient_shift():
    # one layer net: yhat = w log x + b; dMSE/db = 2 mean(yhat - y)
    w = [(np.array([[0.7]]), np.array([0.2]))]
    X = np.array([[2.0], [3.0], [4.0]])
    yhat = 0.7 * np.log(X[:, 0]) + 0.2
    y = np.array([1.0, -1.0, 0.5])
    g1 = backward(w, X, y)[0][1][0]
    g2 = backward(w, X, 2 * y)[0][1][0]
    assert g1 == pytest.approx(2 * np.mean(yhat - y))
    assert g2 - g1 == pytest.approx(-2 * np.mean(y))


def test_backward_rejects_empty_batch():
    with pytest.raises(ValueError):
        backward(random_net([2], 2, 0), np.zeros((0, 2)), [])


# ---- training


def test_architecture_invariants():
    with pytest.raises(ValueError):
        MlpArchitecture((), 14)
    with pytest.raises(ValueError):
        MlpArchitecture((0,), 14)
    with pytest.raises(ValueError):
        MlpArchitecture((4,), 14, "tanh")
    assert MlpArchitecture((32, 64, 32), 14).layer_dims == [14, 32, 64, 32, 1]


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"validation_fraction": 1.0}, {"validation_fraction": 0}])
def test_train_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_constant_targets_learned_exactly():
    # the default step size needs far more than 200 epochs to silence the
    # hidden layer's input dependence; a larger one gets there quickly
    rng = np.random.default_rng(0)
    X = rng.uniform(1, 100, size=(20_000, 4))
    y = np.full(20_000, 2.5)
    model, hist = train(X, y, MlpArchitecture((8,), 4), TrainConfig(epochs=200, learning_rate=1e-2), "test")
    assert min(h["val_mse"] for h in hist) <= 1e-6


def test_synthetic_max_ratio_target():
    rng = np.random.default_rng(1)
    X = np.exp(rng.uniform(0, 3, size=(50_000, 3)))
    y = np.maximum(np.log(X[:, 0]) + np.log(X[:, 1]) - np.log(X[:, 2]), 0)
    cfg = TrainConfig(epochs=30, rng_seed=2)
    model, hist = train(X, y, MlpArchitecture((32, 64, 32), 3), cfg, "test")
    assert min(h["val_mse"] for h in hist) < 0.05


def test_training_is_deterministic_and_keeps_best_epoch():
    rng = np.random.default_rng(3)
    X = np.exp(rng.uniform(0, 2, size=(3000, 2)))
    y = np.log(X[:, 0]) * 2 - np.log(X[:, 1])
    cfg = TrainConfig(epochs=5, rng_seed=4)
    m1, h1 = train(X, y, MlpArchitecture((6,), 2), cfg, "test")
    m2, h2 = train(X, y, MlpArchitecture((6,), 2), cfg, "test")
    assert h1 == h2
    assert all(np.array_equal(a, b) for (a, _), (b, _) in zip(m1.weights, m2.weights))
    assert len(h1) == 5


def test_returned_weights_are_the_best_validation_epoch():
    rng = np.random.default_rng(3)
    X = np.exp(rng.uniform(0, 2, size=(3000, 2)))
    y = rng.normal(size=3000)  # pure noise: validation error wanders
    Xv, yv = X[:300], rng.normal(size=300)
    model, hist = train(X, y, MlpArchitecture((16,), 2), TrainConfig(epochs=15, learning_rate=1e-2), "t", (Xv, yv))
    assert evaluate(model, Xv, yv) == pytest.approx(min(h["val_mse"] for h in hist), rel=1e-12)


def test_full_batch_gradient_descent_is_monotone():
    rng = np.random.default_rng(6)
    X = np.exp(rng.uniform(0, 2, size=(64, 3)))
    y = rng.normal(size=64)
    w = random_net([5, 5], 3, 7)
    losses = []
    for _ in range(50):
        g = backward(w, X, y)
        losses.append(np.mean([(forward(w, x) - t) ** 2 for x, t in zip(X, y)]))
        w = [(W - 1e-3 * gW, b - 1e-3 * gb) for (W, b), (gW, gb) in zip(w, g)]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_divergence_is_reported():
    rng = np.random.default_rng(8)
    X = np.exp(rng.uniform(0, 5, size=(3000, 3)))
    y = rng.normal(scale=1e3, size=3000)
    with pytest.raises(TrainingDiverged, match="learning rate"):
        train(X, y, MlpArchitecture((16, 16), 3), TrainConfig(learning_rate=5.0, epochs=20), "test")


def test_train_requires_enough_data():
    with pytest.raises(ValueError):
        train(np.ones((100, 2)), np.zeros(100), MlpArchitecture((2,), 2), TrainConfig(), "test")


# ---- evaluate


def _fixed_model(seed=0, input_dim=3):
    arch = MlpArchitecture((5, 4), input_dim)
    return PerfModel(arch, random_net([5, 4], input_dim, seed), "test", log_features=True)


def test_evaluate_single_exact_sample():
    m = _fixed_model()
    x = np.array([[2.0, 3.0, 4.0]])
    assert evaluate(m, x, m.predict(x)) == 0.0


def test_evaluate_rejects_empty():
    with pytest.raises(ValueError):
        evaluate(_fixed_model(), np.zeros((0, 3)), [])


def test_evaluate_matches_independent_mean_and_is_order_invariant():
    m = _fixed_model(1)
    rng = np.random.default_rng(2)
    X = rng.uniform(0.5, 50, size=(1000, 3))
    y = rng.normal(size=1000)
    ref = math.fsum((mlp_forward_loops(m.weights, x) - t) ** 2 for x, t in zip(X, y)) / 1000
    assert evaluate(m, X, y) == pytest.approx(ref, rel=1e-12)
    perm = rng.permutation(1000)
    assert evaluate(m, X[perm], y[perm]) == pytest.approx(evaluate(m, X, y), rel=1e-12)


def test_predict_matches_forward_without_standardisation():
    m = _fixed_model(3)
    X = np.random.default_rng(4).uniform(1, 9, size=(20, 3))
    assert np.allclose(m.predict(X), [forward(m.weights, x) for x in X], rtol=1e-12)


# ---- persistence


def test_model_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    X = np.exp(rng.uniform(0, 3, size=(3000, 14)))
    y = rng.normal(size=3000)
    model, _ = train(X, y, MlpArchitecture((8, 4), 14), TrainConfig(epochs=2), "gemm-v1")
    p = tmp_path / "m.json"
    save_model(model, p)
    loaded = load_model(p, "gemm-v1")
    assert np.array_equal(loaded.predict(X), model.predict(X))
    assert json.loads(p.read_text())["encoding_version"] == "gemm-v1"


def test_corrupted_model_file(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"format": "inputtune-mlp/1", "layers": [')
    with pytest.raises(ModelFormatError):
        load_model(p)
    p.write_text(json.dumps({"format": "something-else"}))
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_shape_tampering_detected(tmp_path):
    m = _fixed_model(0, 14)
    p = tmp_path / "m.json"
    save_model(m, p)
    doc = json.loads(p.read_text())
    doc["layers"][0]["shape"] = [4, 14]
    doc["layers"][0]["weights"] = doc["layers"][0]["weights"][: 4 * 14]
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_encoding_mismatch_is_hard_error(tmp_path):
    m = PerfModel(MlpArchitecture((4,), 14), random_net([4], 14, 0), "gemm-v1")
    p = tmp_path / "m.json"
    save_model(m, p)
    with pytest.raises(ModelFormatError):
        load_model(p, "conv-v1")
    with pytest.raises(ModelFormatError):
        load_model(p).predict(np.ones((3, 20)))
