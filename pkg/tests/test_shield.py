import logging
import math

import numpy as np
import pytest

import shield
from nn import TrainConfig
from plant import Outcome
from shield import (Decision, DetectorSpec, EndToEndRule, ErrorClass, Sample, Toggles,
                    calibrate_threshold, collect_misclassified, end_to_end_decide, init_detector,
                    judge_trace, load_detector, residual_baseline, residual_scores, sample_accuracy,
                    save_detector, segment_flags, select_exemplars, train_round, trace_windows,
                    window_labels)

SPEC = DetectorSpec(width=20, stride=5, hidden=(16, 8), n_features=8)
TRAIN = TrainConfig(learning_rate=0.05, batch_size=8, max_epochs=3, patience=2)
ALL_ON = Toggles()


@pytest.fixture
def detector(profile):
    return init_detector(SPEC, profile, seed=1)


@pytest.fixture
def attacked(make_trace):
    # abnormal from tick 50 on, 100 ticks
    return make_trace([0] * 50 + [1] * 50, injection_tick=50, shutdown_tick=99)


def separable_samples(detector, n=20):
    """Normal windows at the nominal mean, abnormal ones 3 sigma above it."""
    mean = np.tile(detector.mean, SPEC.width)
    sigma = np.tile(detector.sigma, SPEC.width)
    normal = [Sample(mean.copy(), 0) for _ in range(n)]
    abnormal = [Sample(mean + 3.0 * sigma, 1) for _ in range(n)]
    return normal + abnormal


def test_window_count_and_starts():
    assert SPEC.window_count(100) == 17
    assert SPEC.window_count(20) == 1
    assert SPEC.window_count(19) == 0
    assert np.array_equal(SPEC.window_starts(30), [0, 5, 10])


def test_window_is_abnormal_iff_it_covers_an_abnormal_tick(attacked):
    labels = window_labels(attacked, SPEC)
    assert labels.size == 17
    # start 30 covers 30..49, start 35 reaches tick 50
    assert labels[6] == 0
    assert labels[7] == 1
    assert labels[7:].all()


def test_trace_windows_are_strided_slices(attacked):
    windows = trace_windows(attacked, SPEC)
    assert windows.shape == (17, 20, 8)
    assert np.array_equal(windows[3], attacked.features()[15:35])


def test_misclassified_windows_are_classified_by_error(attacked, make_trace):
    quiet = make_trace([0] * 100, injection_tick=50, outcome=Outcome.INEFFECTIVE)
    batch = collect_misclassified(np.ones(17, dtype=np.int8), quiet, SPEC, round_id=4)
    assert batch.counts[ErrorClass.PREMATURE.value] == 7
    assert batch.counts[ErrorClass.FALSE_POSITIVE.value] == 10
    assert len(batch) == 17
    assert all(s.label == 0 and s.round_id == 4 for s in batch.samples)
    assert batch.samples[0].features.shape == (SPEC.input_size,)

    missed = collect_misclassified(np.zeros(17, dtype=np.int8), attacked, SPEC)
    assert missed.counts[ErrorClass.FALSE_NEGATIVE.value] == 10
    assert missed.error_classes == [ErrorClass.FALSE_NEGATIVE.value]
    assert all(s.label == 1 for s in missed.samples)

    right = collect_misclassified(window_labels(attacked, SPEC), attacked, SPEC)
    assert len(right) == 0


def test_verdict_count_must_match_windows(attacked):
    with pytest.raises(ValueError):
        collect_misclassified(np.zeros(3, dtype=np.int8), attacked, SPEC)


def test_segment_majority_is_strict():
    rule = EndToEndRule(segment_len=10, consecutive_required=3)
    flags = segment_flags(np.array([1, 1, 1, 0, 0, 0, 1, 1]), rule, stride=5)
    assert flags.tolist() == [True, False, False, True]
    # a trailing short segment still needs a strict majority
    assert segment_flags(np.array([1, 1, 1]), rule, stride=5).tolist() == [True, True]
    # stride above the segment length keeps one verdict per segment
    assert segment_flags(np.array([1, 0]), rule, stride=25).tolist() == [True, False]


def test_end_to_end_needs_consecutive_segments():
    rule = EndToEndRule(segment_len=10, consecutive_required=3)
    assert end_to_end_decide(np.ones(6), rule, stride=5) is Decision.ATTACK
    assert end_to_end_decide(np.ones(4), rule, stride=5) is Decision.NO_ATTACK
    assert end_to_end_decide(np.array([1, 1, 1, 1, 0, 0, 1, 1, 1, 1]), rule, stride=5) is Decision.NO_ATTACK
    assert end_to_end_decide(np.zeros(0), rule) is Decision.NO_ATTACK


def scan_for_attack(verdicts, segment_len, stride, required):
    """Plain-loop reference: strict-majority segments, then the longest anomalous run."""
    per = max(1, segment_len // stride)
    run = best = 0
    for start in range(0, len(verdicts), per):
        chunk = verdicts[start:start + per]
        if 2 * sum(chunk) > len(chunk):
            run += 1
            best = max(best, run)
        else:
            run = 0
    return best >= required


def test_end_to_end_matches_a_run_length_scan():
    rng = np.random.default_rng(6)
    for _ in range(10_000):
        seg, stride, c = int(rng.integers(1, 30)), int(rng.integers(1, 12)), int(rng.integers(1, 8))
        per = max(1, seg // stride)
        if rng.random() < 0.5:
            verdicts = (rng.random(int(rng.integers(0, 120))) < rng.random()).astype(np.int8)
        else:
            # runs of exactly C or C-1 loud segments between quiet ones
            parts = []
            for _ in range(int(rng.integers(1, 4))):
                parts += [0] * per
                parts += [1] * per * int(rng.choice([c, c - 1]))
            verdicts = np.asarray(parts, dtype=np.int8)
        expected = scan_for_attack(verdicts.tolist(), seg, stride, c)
        decision = end_to_end_decide(verdicts, EndToEndRule(seg, c), stride)
        assert (decision is Decision.ATTACK) == expected


@pytest.mark.parametrize("c", [1, 2, 5, 8])
def test_exactly_c_loud_segments_is_the_threshold(c):
    rule = EndToEndRule(segment_len=25, consecutive_required=c)
    quiet, loud = [0] * 5, [1] * 5
    hit = np.asarray(quiet + loud * c + quiet, dtype=np.int8)
    near = np.asarray(quiet + loud * (c - 1) + quiet + loud * (c - 1) + quiet, dtype=np.int8)
    assert end_to_end_decide(hit, rule, stride=5) is Decision.ATTACK
    assert end_to_end_decide(near, rule, stride=5) is Decision.NO_ATTACK


def test_judge_gives_one_verdict_per_window(detector, attacked, make_trace, caplog):
    verdicts = judge_trace(detector, attacked)
    assert verdicts.shape == (17,)
    assert set(np.unique(verdicts)) <= {0, 1}
    with caplog.at_level(logging.WARNING):
        assert judge_trace(detector, make_trace([0] * 10, injection_tick=5)).size == 0
    assert "detector width" in caplog.text


def test_normalization_clips_extreme_readings(detector):
    window = np.tile(detector.mean + 1e6 * detector.sigma, SPEC.width)
    z = detector.normalize(window[None, :])
    assert z.max() == SPEC.feature_clip


def test_exemplars_are_bounded_and_spread(detector):
    samples = separable_samples(detector, n=5)
    assert len(select_exemplars(samples, detector, capacity=20)) == 10
    kept = select_exemplars(samples, detector, capacity=4)
    assert len(kept) <= 4
    ids = {id(s) for s in samples}
    assert all(id(s) in ids for s in kept.samples)
    again = select_exemplars(samples, detector, capacity=4)
    assert [id(s) for s in kept.samples] == [id(s) for s in again.samples]


def test_empty_round_leaves_the_detector_alone(detector):
    result = train_round(detector, [], [], TRAIN, ALL_ON, seed=0)
    assert result.detector is detector
    assert not result.trained


def test_training_learns_separable_windows(detector):
    samples = separable_samples(detector)
    config = TrainConfig(learning_rate=0.1, batch_size=8, max_epochs=30, patience=30)
    result = train_round(detector, samples, [], config, ALL_ON, seed=0)
    assert result.trained and not result.diverged
    assert result.n_samples == 40
    assert sample_accuracy(result.detector, samples) >= 0.9
    # the caller's detector is not mutated
    assert result.detector is not detector


def test_cbl_toggle_sets_the_balance_weight(detector, mocker):
    spy = mocker.spy(shield, "balanced_bce_loss")
    samples = separable_samples(detector, n=4)
    train_round(detector, samples, [], TRAIN, Toggles(cbl=False, exe=True, cbp=True), seed=0)
    assert all(call.args[2] == 0.0 for call in spy.call_args_list)
    spy.reset_mock()
    train_round(detector, samples, [], TRAIN, ALL_ON, seed=0)
    assert all(call.args[2] == TRAIN.balance_lambda for call in spy.call_args_list)


def test_cbp_toggle_controls_neuron_replacement(detector, mocker):
    spy = mocker.spy(shield, "cbp_step")
    samples = separable_samples(detector, n=4)
    train_round(detector, samples, [], TRAIN, Toggles(cbl=True, exe=True, cbp=False), seed=0)
    assert spy.call_count == 0
    train_round(detector, samples, [], TRAIN, ALL_ON, seed=0)
    assert spy.call_count > 0


def test_exe_toggle_controls_replay(detector):
    samples = separable_samples(detector, n=4)
    harvested, replay = samples[:3], samples[3:]
    with_replay = train_round(detector, harvested, replay, TRAIN, ALL_ON, seed=0)
    without = train_round(detector, harvested, replay, TRAIN, Toggles(exe=False), seed=0)
    assert with_replay.n_samples == len(samples)
    assert without.n_samples == 3


def test_diverging_round_reverts(detector, mocker):
    mocker.patch("shield.balanced_bce_loss",
                 side_effect=lambda p, y, lam, b=None: (math.nan, np.zeros_like(p)))
    before = detector.model.copy()
    result = train_round(detector, separable_samples(detector, n=4), [], TRAIN, ALL_ON, seed=0)
    assert result.diverged and not result.trained
    assert result.detector is detector
    assert np.array_equal(detector.model.layers[0].weights, before.layers[0].weights)


def test_training_is_deterministic(detector):
    samples = separable_samples(detector, n=4)
    a = train_round(detector, samples, [], TRAIN, ALL_ON, seed=3)
    b = train_round(detector, samples, [], TRAIN, ALL_ON, seed=3)
    assert np.array_equal(a.detector.model.layers[0].weights, b.detector.model.layers[0].weights)


def test_toggles_parse_and_label():
    assert Toggles.parse("cbl,exe") == Toggles(True, True, False)
    assert Toggles.parse("none") == Toggles(False, False, False)
    assert Toggles.parse("") == Toggles(False, False, False)
    with pytest.raises(ValueError):
        Toggles.parse("cbl,turbo")
    combos = Toggles.all_combinations()
    assert len(set(combos)) == 8
    assert combos[0].label == "baseline"
    assert combos[-1].label == "full"
    assert Toggles(True, False, True).label == "cbl+cbp"


def test_residual_baseline_rarely_alarms_on_nominal(tiny_predictor, golden, fast_spec):
    layout = fast_spec.layout
    scores = residual_scores(tiny_predictor, golden, SPEC, layout)
    assert scores.shape == (SPEC.window_count(len(golden)),)
    assert np.all(np.isfinite(scores))
    threshold = calibrate_threshold(tiny_predictor, [golden], SPEC, layout, quantile=99.5)
    assert math.isfinite(threshold)
    assert residual_baseline(tiny_predictor, golden, threshold, SPEC, layout).sum() <= 2
    assert calibrate_threshold(tiny_predictor, [], SPEC, layout) == math.inf


def test_detector_checkpoint_round_trip(tmp_path, detector, attacked):
    path = tmp_path / "detector.json"
    save_detector(detector, str(path))
    loaded = load_detector(str(path))
    assert loaded.spec == detector.spec
    assert np.array_equal(judge_trace(loaded, attacked), judge_trace(detector, attacked))
