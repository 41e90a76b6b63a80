import numpy as np
import pytest

from nn import (Activation, ShapeError, TrainConfig, backward, balanced_bce_loss, cbp_step,
                extract_features, forward, init_model, load_checkpoint, models_equal, mse_loss,
                predict, save_checkpoint, sgd_step)


def test_init_is_seeded_and_fan_in_bounded():
    a = init_model([6, 10, 4, 1], seed=5)
    b = init_model([6, 10, 4, 1], seed=5)
    assert models_equal(a, b)
    assert not models_equal(a, init_model([6, 10, 4, 1], seed=6))
    for layer, fan_in in zip(a.layers, [6, 10, 4]):
        assert np.all(np.abs(layer.weights) <= 1.0 / np.sqrt(fan_in))
        assert not layer.biases.any()
    assert a.sizes == [6, 10, 4, 1]
    assert a.feature_size == 4


def test_invalid_sizes_are_rejected():
    with pytest.raises(ShapeError):
        init_model([4])
    with pytest.raises(ShapeError):
        init_model([4, 0, 1])


def test_forward_rejects_wrong_width():
    model = init_model([3, 4, 1])
    with pytest.raises(ShapeError):
        forward(model, np.zeros(4))


def test_batch_and_single_forward_agree():
    model = init_model([5, 7, 3, 1], seed=1)
    x = np.random.default_rng(0).normal(size=(9, 5))
    batch = predict(model, x, batch_size=4)
    singles = np.vstack([forward(model, row)[0] for row in x])
    assert np.allclose(batch, singles)
    assert batch.shape == (9, 1)
    assert np.all((batch > 0) & (batch < 1))


def test_extract_features_is_the_penultimate_layer():
    model = init_model([5, 7, 3, 1], seed=1)
    x = np.ones((2, 5))
    _, acts = forward(model, x)
    feats = extract_features(model, x)
    assert feats.shape == (2, 3)
    assert np.array_equal(feats, acts[-2])
    assert np.all(feats >= 0)


def test_backward_matches_finite_differences():
    model = init_model([4, 5, 3], output_activation=Activation.SIGMOID,
                       hidden_activation=Activation.SIGMOID, seed=2)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 4))
    t = rng.random((6, 3))

    out, acts = forward(model, x)
    grads = backward(model, acts, mse_loss(out, t)[1])

    eps = 1e-6
    w = model.layers[0].weights
    numeric = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        old = w[idx]
        w[idx] = old + eps
        up = mse_loss(forward(model, x)[0], t)[0]
        w[idx] = old - eps
        down = mse_loss(forward(model, x)[0], t)[0]
        w[idx] = old
        numeric[idx] = (up - down) / (2 * eps)
    err = np.linalg.norm(numeric - grads.weights[0]) / np.linalg.norm(numeric)
    assert err < 1e-4


def central_difference(model, x, t, param, eps=1e-6):
    numeric = np.zeros_like(param)
    for idx in np.ndindex(param.shape):
        old = param[idx]
        param[idx] = old + eps
        up = mse_loss(forward(model, x)[0], t)[0]
        param[idx] = old - eps
        down = mse_loss(forward(model, x)[0], t)[0]
        param[idx] = old
        numeric[idx] = (up - down) / (2 * eps)
    return numeric


def test_relu_backprop_matches_finite_differences_on_random_nets():
    rng = np.random.default_rng(8)
    worst = 0.0
    for seed in range(100):
        model = init_model([4, 8, 8, 1], output_activation=Activation.IDENTITY, seed=seed)
        for layer in model.layers:
            layer.biases[:] = rng.normal(scale=0.1, size=layer.biases.shape)
        x = rng.normal(size=(5, 4))
        t = rng.normal(size=(5, 1))

        out, acts = forward(model, x)
        grads = backward(model, acts, mse_loss(out, t)[1])
        analytic = np.concatenate([g.ravel() for g in grads.weights + grads.biases])
        numeric = np.concatenate(
            [central_difference(model, x, t, layer.weights).ravel() for layer in model.layers]
            + [central_difference(model, x, t, layer.biases).ravel() for layer in model.layers])
        scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    assert worst < 1e-4


def test_balanced_bce_penalizes_class_imbalance():
    p = np.array([0.9, 0.8, 0.7, 0.6])   # every sample predicted abnormal
    y = np.array([1, 1, 0, 0])
    plain, _ = balanced_bce_loss(p, y, lam=0.0)
    balanced, grad = balanced_bce_loss(p, y, lam=1.0, batch_size=4)
    # 2 abnormal right, 0 normal right
    assert balanced == pytest.approx(plain + 0.5)
    _, plain_grad = balanced_bce_loss(p, y, lam=0.0)
    assert np.array_equal(grad, plain_grad)


def test_balance_penalty_scales_with_the_count_gap():
    y = np.array([1, 1, 1, 0, 0, 0, 0, 0])
    # 3 abnormal right, 1 normal right
    p = np.array([0.9, 0.8, 0.7, 0.6, 0.7, 0.8, 0.9, 0.2])
    plain, _ = balanced_bce_loss(p, y, lam=0.0)
    assert balanced_bce_loss(p, y, lam=2.0, batch_size=8)[0] == pytest.approx(plain + 2.0 / 8 * 2)
    assert balanced_bce_loss(p, y, lam=2.0, batch_size=16)[0] == pytest.approx(plain + 2.0 / 16 * 2)
    # equal counts: no penalty
    even = np.array([0.9, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9])
    assert balanced_bce_loss(even, y, lam=5.0)[0] == pytest.approx(balanced_bce_loss(even, y, lam=0.0)[0])


def test_balanced_bce_rejects_saturated_predictions():
    with pytest.raises(ValueError):
        balanced_bce_loss(np.array([1.0, 0.5]), np.array([1, 0]), lam=1.0)
    with pytest.raises(ValueError):
        balanced_bce_loss(np.array([0.5]), np.array([1, 0]), lam=1.0)
    with pytest.raises(ValueError):
        balanced_bce_loss(np.array([]), np.array([]), lam=1.0)


def test_sgd_lowers_the_loss():
    model = init_model([3, 8, 1], seed=4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(32, 3))
    y = (x[:, 0] > 0).astype(float)
    first = None
    for _ in range(200):
        out, acts = forward(model, x)
        loss, grad = balanced_bce_loss(out, y, lam=0.0)
        first = loss if first is None else first
        sgd_step(model, backward(model, acts, grad), 0.5)
    assert balanced_bce_loss(forward(model, x)[0], y, lam=0.0)[0] < first


def test_cbp_replaces_one_dead_neuron():
    model = init_model([3, 8, 2], seed=0)
    before_out = model.layers[1].weights.copy()
    acts = [np.ones(3), np.zeros(8), np.full(2, 0.5)]
    config = TrainConfig(replacement_rate=0.2, utility_decay=0.9)

    # a fresh model, first step: no maturity wait before replacing
    cbp_step(model, acts, config)

    assert model.replacements == 1
    assert model.replace_counters[0] == pytest.approx(0.6)
    # all utilities tie at zero, so the first neuron goes
    assert not model.layers[1].weights[0].any()
    assert np.array_equal(model.layers[1].weights[1:], before_out[1:])
    assert model.layers[0].biases[0] == 0.0


def test_cbp_leaves_active_neurons_alone():
    model = init_model([3, 4, 1], seed=0)
    acts = [np.ones(3), np.ones(4), np.full(1, 0.5)]
    cbp_step(model, acts, TrainConfig(utility_decay=0.5))
    assert model.replacements == 0
    assert np.allclose(model.utilities[0], 0.5)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(utility_decay=1.0)
    cfg = TrainConfig.from_config({"learning_rate": 0.1, "batch_size": 8, "unused": 1})
    assert cfg.learning_rate == 0.1
    assert cfg.batch_size == 8


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = init_model([4, 6, 2, 1], seed=9)
    cbp_step(model, [np.ones(4), np.zeros(6), np.ones(2), np.full(1, 0.5)],
             TrainConfig(replacement_rate=0.5))
    path = tmp_path / "model.json"
    save_checkpoint(model, str(path), extra={"round": 3})

    loaded, extra = load_checkpoint(str(path))
    assert models_equal(model, loaded)
    assert extra == {"round": 3}
    assert loaded.replacements == model.replacements
    # generator state survives, so later replacements match too
    assert model.rng.random() == loaded.rng.random()
