import copy
import logging

import numpy as np
import pytest

from attack_vector import AttackVector
from config import set_path
from evolve import collect_episodes
from nn import ShapeError, TrainConfig, TrainingDivergedError, predict
from plant import KC_LEVEL, Outcome, PlantSpec, SafetyEnvelope, run_episode
from predictor import (MIN_EPISODES, Normalizer, WindowSpec, build_dataset, embed, embed_many,
                       load_predictor, perturbed_inputs, predict_effect, predict_effects,
                       predict_trace, raw_windows, save_predictor, split_episodes, train_predictor)

FAST_TRAIN = TrainConfig(learning_rate=0.01, batch_size=16, max_epochs=3, patience=2)


@pytest.fixture
def episodes(make_trace):
    return [make_trace(np.zeros(60), injection_tick=30, seed=s) for s in range(5)]


def test_raw_windows_pair_each_window_with_the_horizon_target():
    window = WindowSpec(width=3, horizon=2, n_features=2, n_targets=1)
    feats = np.column_stack([np.arange(10.0), -np.arange(10.0)])
    x, y = raw_windows(feats, window)
    assert x.shape == (6, 3, 2)
    assert np.array_equal(x[0, :, 0], [0, 1, 2])
    assert y[0, 0] == 4.0
    assert y[-1, 0] == 9.0

    x2, y2 = raw_windows(feats, window, stride=4)
    assert np.array_equal(x2[:, 0, 0], [0, 4])
    assert np.array_equal(y2[:, 0], [4, 8])


def test_raw_windows_on_a_short_trace_is_empty():
    window = WindowSpec(width=5, horizon=5, n_features=2, n_targets=1)
    x, y = raw_windows(np.zeros((9, 2)), window)
    assert x.shape == (0, 5, 2)
    assert y.shape == (0, 1)


def test_split_is_seeded_and_keeps_a_validation_episode():
    ids = [f"e{i}" for i in range(5)]
    split = split_episodes(ids, seed=3)
    assert split == split_episodes(ids, seed=3)
    assert list(split.values()).count("train") == 4
    two = split_episodes(["a", "b"], seed=0)
    assert sorted(two.values()) == ["train", "validation"]


def test_dataset_normalizes_on_train_only(episodes, fast_spec, tiny_predictor):
    window = tiny_predictor.window
    ds = build_dataset(episodes, window, fast_spec.layout, seed=1)
    assert ds.train.x.shape[1] == window.input_size
    assert ds.train.y.shape[1] == window.n_targets
    assert len(ds.validation) > 0
    assert ds.train.x.min() >= 0.0 and ds.train.x.max() <= 1.0
    assert ds.train.y.min() >= 0.0 and ds.train.y.max() <= 1.0
    per_episode = 60 - window.width - window.horizon + 1
    assert len(ds.train) + len(ds.validation) == 5 * per_episode


def test_short_episodes_are_skipped_and_counted(episodes, make_trace, fast_spec, tiny_predictor, caplog):
    short = make_trace(np.zeros(5), injection_tick=2, seed=99)
    with caplog.at_level(logging.WARNING):
        ds = build_dataset(episodes + [short], tiny_predictor.window, fast_spec.layout, seed=1)
    assert ds.skipped == 1
    assert "t99" not in ds.split
    assert any(str(MIN_EPISODES) in r.message for r in caplog.records)

    with pytest.raises(ValueError):
        build_dataset([short], tiny_predictor.window, fast_spec.layout, seed=1)


def test_training_is_deterministic_and_records_history(episodes, fast_spec, tiny_predictor):
    ds = build_dataset(episodes, tiny_predictor.window, fast_spec.layout, seed=1)
    a = train_predictor(ds, FAST_TRAIN, hidden=[12, 6], seed=4)
    b = train_predictor(ds, FAST_TRAIN, hidden=[12, 6], seed=4)
    assert a.history == b.history
    assert 1 <= len(a.history) <= FAST_TRAIN.max_epochs
    assert all(np.isfinite(v) for pair in a.history for v in pair)
    assert a.embedding_size == 6


def test_non_finite_loss_aborts_training(episodes, fast_spec, tiny_predictor, mocker):
    ds = build_dataset(episodes, tiny_predictor.window, fast_spec.layout, seed=1)
    mocker.patch("predictor.mse_loss", side_effect=lambda p, t: (float("nan"), np.zeros_like(p)))
    with pytest.raises(TrainingDivergedError):
        train_predictor(ds, FAST_TRAIN, hidden=[12, 6], seed=4)


def test_zero_attack_input_is_the_normalized_window(tiny_predictor, golden, fast_spec):
    w = tiny_predictor.window.width
    window = golden.predictor_features(fast_spec.layout)[300:300 + w]
    zero = AttackVector.zeros(fast_spec.layout)
    effect = predict_effect(tiny_predictor, window, zero)
    assert effect.shape == (fast_spec.n_sensors,)
    assert np.all(np.isfinite(effect))

    ends = [300 + w + tiny_predictor.window.horizon]
    assert np.allclose(predict_trace(tiny_predictor, golden.predictor_features(fast_spec.layout), ends)[0],
                       effect)


def test_attack_deltas_shift_every_tick_of_the_window(tiny_predictor, golden, fast_spec):
    w = tiny_predictor.window.width
    window = golden.predictor_features(fast_spec.layout)[300:300 + w]
    v = AttackVector(np.random.default_rng(4).normal(size=fast_spec.layout.size))
    shifted = window + v.deltas
    expected = tiny_predictor.feature_norm.normalize(shifted).reshape(1, -1)
    assert np.allclose(perturbed_inputs(tiny_predictor, window, [v]), expected)
    assert np.allclose(predict_effect(tiny_predictor, window, v),
                       tiny_predictor.target_norm.denormalize(predict(tiny_predictor.model, expected))[0])


def test_batch_forecasts_match_single_forecasts(tiny_predictor, golden, fast_spec):
    w = tiny_predictor.window.width
    window = golden.predictor_features(fast_spec.layout)[300:300 + w]
    rng = np.random.default_rng(0)
    vectors = [AttackVector(rng.normal(size=fast_spec.layout.size) * 0.1) for _ in range(4)]
    batch = predict_effects(tiny_predictor, window, vectors)
    singles = np.vstack([predict_effect(tiny_predictor, window, v) for v in vectors])
    assert np.allclose(batch, singles)

    emb = embed_many(tiny_predictor, window, vectors)
    assert emb.shape == (4, tiny_predictor.embedding_size)
    assert np.allclose(emb[2], embed(tiny_predictor, window, vectors[2]))


def test_wrong_window_shape_is_rejected(tiny_predictor, fast_spec):
    zero = AttackVector.zeros(fast_spec.layout)
    with pytest.raises(ShapeError):
        predict_effect(tiny_predictor, np.zeros((3, fast_spec.layout.size)), zero)


def test_predict_trace_without_history_is_nan(tiny_predictor, golden, fast_spec):
    out = predict_trace(tiny_predictor, golden.predictor_features(fast_spec.layout), [1, 5])
    assert np.isnan(out).all()


def test_normalizer_handles_constant_columns():
    norm = Normalizer.fit(np.array([[1.0, 5.0], [3.0, 5.0]]))
    assert np.array_equal(norm.normalize(np.array([2.0, 5.0])), [0.5, 0.0])
    assert np.allclose(norm.denormalize(norm.normalize(np.array([2.5, 5.0]))), [2.5, 5.0])


def test_predictor_checkpoint_round_trip(tmp_path, tiny_predictor, golden, fast_spec):
    path = tmp_path / "predictor.json"
    save_predictor(tiny_predictor, str(path))
    loaded = load_predictor(str(path))
    assert loaded.window == tiny_predictor.window
    w = tiny_predictor.window.width
    window = golden.predictor_features(fast_spec.layout)[300:300 + w]
    zero = AttackVector.zeros(fast_spec.layout)
    assert np.array_equal(predict_effect(loaded, window, zero), predict_effect(tiny_predictor, window, zero))


# ============================================================================
# TRAINED ON THE QUICK PLANT
# ============================================================================

@pytest.fixture(scope="module")
def forecaster(fast_cfg):
    cfg = copy.deepcopy(fast_cfg)
    set_path(cfg, "predictor.width", 16)
    set_path(cfg, "predictor.horizon", 20)
    set_path(cfg, "predictor.hidden", [32, 16])
    spec = PlantSpec.from_config(cfg)
    traces = collect_episodes(cfg, seed=5, n_episodes=12)
    ds = build_dataset(traces, WindowSpec.from_config(cfg, spec.layout), spec.layout, seed=5, stride=2)
    train = TrainConfig(learning_rate=0.01, batch_size=32, max_epochs=25, patience=5)
    return cfg, spec, ds, train_predictor(ds, train, cfg["predictor"]["hidden"], seed=5)


@pytest.mark.slow
def test_trained_forecaster_beats_the_mean_predictor(forecaster):
    _, _, ds, pm = forecaster
    assert len(ds.validation) > 0
    model_mse = float(np.mean((predict(pm.model, ds.validation.x) - ds.validation.y) ** 2))
    mean_mse = float(np.mean((ds.train.y.mean(axis=0) - ds.validation.y) ** 2))
    assert model_mse < mean_mse


@pytest.mark.slow
def test_kc_flip_forecast_follows_the_simulated_level_trend(forecaster):
    cfg, spec, _, pm = forecaster
    deltas = np.zeros(spec.layout.size)
    deltas[spec.layout.signal_slots + KC_LEVEL] = -2.0 * spec.nominal_configs[KC_LEVEL]
    trace = run_episode(spec, SafetyEnvelope.from_config(cfg), AttackVector(deltas), seed=9)
    assert trace.outcome is Outcome.EFFECTIVE

    level, h = 1, pm.window.horizon     # level_2 fills once the feed is driven open
    ends = np.arange(spec.injection_tick + pm.window.width + h, len(trace) + 1)
    assert ends.size > 20
    forecast = predict_trace(pm, trace.predictor_features(spec.layout), ends)
    last_seen = trace.sensors[ends - h - 1, level]
    simulated = trace.sensors[ends - 1, level] - last_seen
    predicted = forecast[:, level] - last_seen
    assert np.all(simulated > 0)
    assert np.mean(np.sign(predicted) == np.sign(simulated)) >= 0.8
