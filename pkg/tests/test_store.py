import math

import numpy as np
import pytest

from attack_vector import AttackVector
from plant import Outcome
from shield import Sample
from store import (CampaignManifest, ManifestError, TraceFormatError, append_jsonl,
                   compute_metrics, discovery_report, metrics_table, read_archive, read_jsonl,
                   read_trace, sha256_file, sidecar_path, write_archive, write_json, write_samples,
                   write_trace)


@pytest.fixture
def trace_file(tmp_path, make_trace):
    trace = make_trace([0] * 60 + [1] * 40, injection_tick=60, shutdown_tick=99, seed=3)
    trace.tripped = [3]
    path = tmp_path / "ep.csv"
    write_trace(trace, str(path))
    return trace, path


def test_trace_survives_a_write_read_cycle_exactly(trace_file):
    trace, path = trace_file
    back = read_trace(str(path))
    assert np.array_equal(back.sensors, trace.sensors)
    assert np.array_equal(back.actuators, trace.actuators)
    assert np.array_equal(back.labels, trace.labels)
    assert back.outcome is trace.outcome
    assert back.shutdown_tick == 99
    assert back.tripped == [3]
    assert back.attack.source == "manual"
    assert path.read_text().splitlines()[0] == "tick,a_0,a_1,a_2,s_0,s_1,s_2,s_3,s_4,label"


def test_truncated_trace_names_the_last_valid_line(trace_file):
    _, path = trace_file
    text = path.read_text()
    path.write_text(text[:text.rstrip("\n").rfind(",") - 3])
    with pytest.raises(TraceFormatError, match="line 101.*last valid line 100"):
        read_trace(str(path))


def test_missing_rows_are_detected(trace_file):
    _, path = trace_file
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-1]))
    with pytest.raises(TraceFormatError, match="expected 100 rows"):
        read_trace(str(path))


def test_tick_gap_is_detected(trace_file):
    _, path = trace_file
    lines = path.read_text().splitlines(keepends=True)
    lines[6] = "7" + lines[6][1:]
    path.write_text("".join(lines))
    with pytest.raises(TraceFormatError, match="line 7"):
        read_trace(str(path))


def test_bad_label_and_header_are_detected(trace_file):
    _, path = trace_file
    original = path.read_text()
    lines = original.splitlines(keepends=True)
    lines[2] = lines[2].rstrip("\n")[:-1] + "2\n"
    path.write_text("".join(lines))
    with pytest.raises(TraceFormatError, match="label"):
        read_trace(str(path))

    path.write_text(original.replace("tick,", "time,", 1))
    with pytest.raises(TraceFormatError, match="header"):
        read_trace(str(path))


def test_missing_sidecar_is_a_format_error(trace_file):
    _, path = trace_file
    (path.parent / sidecar_path(path.name)).unlink()
    with pytest.raises(TraceFormatError):
        read_trace(str(path))


def test_manifest_verifies_digests(tmp_path, trace_file):
    trace, path = trace_file
    result = tmp_path / "summary.json"
    write_json(str(result), {"ok": True})
    manifest = CampaignManifest(command="fuzz", seed=7, config={"seed": 7})
    manifest.add_episode(str(tmp_path), str(path), trace.outcome)
    manifest.add_result(str(tmp_path), str(result))
    manifest.write(str(tmp_path / "manifest.json"))

    back = CampaignManifest.read(str(tmp_path / "manifest.json"))
    assert back.episodes[0]["path"] == "ep.csv"
    assert back.episodes[0]["outcome"] == "Effective"
    assert back.created_at == manifest.created_at
    # the sidecar is tracked alongside the episode
    assert {r["path"] for r in back.results} == {"ep.json", "summary.json"}
    back.verify(str(tmp_path))

    write_json(str(result), {"ok": False})
    with pytest.raises(ManifestError, match="digest mismatch"):
        back.verify(str(tmp_path))
    result.unlink()
    with pytest.raises(ManifestError, match="missing"):
        back.verify(str(tmp_path))


def test_manifest_rejects_unknown_versions(tmp_path):
    write_json(str(tmp_path / "m.json"), {"command": "x", "seed": 1, "config": {}, "format_version": 99})
    with pytest.raises(ManifestError):
        CampaignManifest.read(str(tmp_path / "m.json"))


def test_same_content_gives_same_digest(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_json(str(a), {"b": 1, "a": [1.5, 2]})
    write_json(str(b), {"a": [1.5, 2], "b": 1})
    assert sha256_file(str(a)) == sha256_file(str(b))


def test_jsonl_appends(tmp_path):
    path = str(tmp_path / "rounds.jsonl")
    append_jsonl(path, {"round": 0})
    append_jsonl(path, {"round": 1})
    assert read_jsonl(path) == [{"round": 0}, {"round": 1}]


def test_window_and_trace_metrics():
    report = compute_metrics([1, 0, 1, 1], [1, 0, 0, 1],
                             decisions=[True, False, True],
                             outcomes=[Outcome.EFFECTIVE, Outcome.INEFFECTIVE, Outcome.EXCLUDED_SHORT],
                             split="seen")
    assert (report.tp, report.fp, report.tn, report.fn) == (2, 1, 1, 0)
    assert report.accuracy == pytest.approx(0.75)
    assert report.precision == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(1.0)
    assert report.f1 == pytest.approx(0.8)
    assert report.detection_rate == 1.0
    assert report.false_alarm_rate == 0.0
    assert (report.n_effective, report.n_ineffective) == (1, 1)


def test_metrics_match_independent_counting():
    rng = np.random.default_rng(12)
    kinds = [Outcome.EFFECTIVE, Outcome.INEFFECTIVE, Outcome.EXCLUDED_SHORT]
    for _ in range(1000):
        n, m = int(rng.integers(1, 60)), int(rng.integers(0, 12))
        pred = rng.integers(0, 2, n).tolist()
        true = rng.integers(0, 2, n).tolist()
        decisions = (rng.random(m) < 0.5).tolist()
        outcomes = [kinds[int(i)] for i in rng.integers(0, 3, m)]
        report = compute_metrics(pred, true, decisions, outcomes)

        tp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 1)
        fp = sum(1 for p, t in zip(pred, true) if p == 1 and t == 0)
        tn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 0)
        fn = sum(1 for p, t in zip(pred, true) if p == 0 and t == 1)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        assert (report.tp, report.fp, report.tn, report.fn) == (tp, fp, tn, fn)
        assert report.accuracy == pytest.approx((tp + tn) / n)
        assert report.precision == pytest.approx(precision)
        assert report.recall == pytest.approx(recall)
        assert report.f1 == pytest.approx(f1)

        eff = [d for d, o in zip(decisions, outcomes) if o is Outcome.EFFECTIVE]
        ineff = [d for d, o in zip(decisions, outcomes) if o is Outcome.INEFFECTIVE]
        assert (report.n_effective, report.n_ineffective) == (len(eff), len(ineff))
        if eff:
            assert report.detection_rate == pytest.approx(sum(eff) / len(eff))
        else:
            assert math.isnan(report.detection_rate)
        if ineff:
            assert report.false_alarm_rate == pytest.approx(sum(ineff) / len(ineff))
        else:
            assert math.isnan(report.false_alarm_rate)


def test_metrics_edge_cases():
    empty = compute_metrics([], [])
    assert empty.n_samples == 0
    assert math.isnan(empty.accuracy)
    # no positives anywhere: precision and recall fall back to zero
    quiet = compute_metrics([0, 0], [0, 0])
    assert quiet.accuracy == 1.0
    assert quiet.precision == 0.0
    with pytest.raises(ValueError):
        compute_metrics([1], [1, 0])
    df = metrics_table([quiet, empty], model="shield")
    assert list(df.columns[:2]) == ["model", "split"]
    assert len(df) == 2


def test_archive_and_samples_files(tmp_path):
    path = str(tmp_path / "embeddings.csv")
    write_archive(np.array([[0.5, 1.0], [0.25, 0.0]]), [{"round": 0}, {"round": 1}], path)
    df = read_archive(path)
    assert list(df.columns) == ["round", "e_0", "e_1"]
    assert df["e_0"].tolist() == [0.5, 0.25]

    samples_path = tmp_path / "exemplars.csv"
    write_samples([Sample(np.array([1.0, 2.0]), 1, "false_negative", 3)], str(samples_path))
    assert samples_path.read_text().splitlines()[0] == "f_0,f_1,label,error_class,round_id"
    write_samples([], str(samples_path))
    assert samples_path.read_text().strip() == "label,error_class,round_id"


def test_discovery_report_counts_by_source(make_trace):
    def attacked(source, slots, outcome, tripped, seed):
        t = make_trace([0] * 10, injection_tick=5, outcome=outcome, seed=seed)
        deltas = np.zeros(16)
        deltas[list(slots)] = 1.0
        t.attack = AttackVector(deltas, source=source)
        t.tripped = tripped
        return t

    traces = [
        attacked("ga", [0], Outcome.EFFECTIVE, [3], 0),
        attacked("ga", [0, 1], Outcome.EFFECTIVE, [3, 4], 1),
        attacked("random", [2], Outcome.INEFFECTIVE, [], 2),
        attacked("random", [2, 3], Outcome.EXCLUDED_SHORT, [0], 3),
    ]
    df = discovery_report(traces, ["l1", "l2", "flow", "temp", "press"]).set_index("source")
    assert df.loc["ga", "Effective"] == 2
    assert df.loc["ga", "mult_single"] == 1
    assert df.loc["ga", "mult_double"] == 1
    assert df.loc["ga", "trip_temp"] == 2
    assert df.loc["random", "Effective"] == 0
    assert df.loc["all", "total"] == 4
    # ExcludedShort trips do not count
    assert df.loc["all", "trip_l1"] == 0
