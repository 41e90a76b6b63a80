# store.py - traces, manifests, metrics and result files
"""
Everything that touches disk. Floats are written with 17 significant digits so
every CSV/JSON round trip is bit-exact. Result files carry no timestamps; the
only wall-clock value lives in the campaign manifest.
"""

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.metrics import (accuracy_score, confusion_matrix, f1_score, precision_score,
                             recall_score)

from attack_vector import AttackVector
from plant import Outcome, Trace

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
FLOAT_FORMAT = "%.17g"


class TraceFormatError(ValueError):
    """Malformed trace CSV or sidecar."""


class ManifestError(ValueError):
    """Manifest references a missing file or a file whose digest changed."""


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def read_json(path: str) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def append_jsonl(path: str, record: Mapping[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def write_table(df: pd.DataFrame, path: str, index: bool = False) -> None:
    df.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n")


# ============================================================================
# TRACES
# ============================================================================

def sidecar_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".json"


def trace_columns(n_actuators: int, n_sensors: int) -> List[str]:
    return (["tick"] + [f"a_{i}" for i in range(n_actuators)]
            + [f"s_{i}" for i in range(n_sensors)] + ["label"])


def write_trace(trace: Trace, path: str) -> None:
    """CSV rows `tick,a_*,s_*,label` plus a JSON sidecar with the episode metadata."""
    n_a, n_s = trace.actuators.shape[1], trace.sensors.shape[1]
    data: Dict[str, Any] = {"tick": trace.ticks.astype(np.int64)}
    for i in range(n_a):
        data[f"a_{i}"] = trace.actuators[:, i]
    for i in range(n_s):
        data[f"s_{i}"] = trace.sensors[:, i]
    data["label"] = trace.labels.astype(np.int64)
    write_table(pd.DataFrame(data, columns=trace_columns(n_a, n_s)), path)
    write_json(sidecar_path(path), {
        "format_version": FORMAT_VERSION,
        "episode_id": trace.episode_id,
        "injection_tick": trace.injection_tick,
        "outcome": trace.outcome.value,
        "attack": trace.attack.to_list(),
        "attack_source": trace.attack.source,
        "seed": trace.seed,
        "base_configs": [float(x) for x in trace.base_configs],
        "shutdown_tick": trace.shutdown_tick,
        "tripped": list(trace.tripped),
        "initial_drift": trace.initial_drift.to_list() if trace.initial_drift is not None else None,
        "rows": len(trace),
        "n_actuators": n_a,
        "n_sensors": n_s,
    })


def read_trace(path: str) -> Trace:
    """
    Inverse of write_trace.

    Raises:
        TraceFormatError naming the offending line and the last valid line.
    """
    try:
        meta = read_json(sidecar_path(path))
    except (OSError, json.JSONDecodeError) as e:
        raise TraceFormatError(f"{path}: cannot read sidecar ({e})") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise TraceFormatError(f"{path}: unsupported format version {meta.get('format_version')}")

    columns = trace_columns(meta["n_actuators"], meta["n_sensors"])
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, ValueError) as e:
        raise TraceFormatError(f"{path}: {e}") from e
    if list(df.columns) != columns:
        raise TraceFormatError(f"{path}: line 1: header {list(df.columns)} != {columns}")

    values = df.to_numpy(dtype=float)
    bad_rows = np.flatnonzero(~np.all(np.isfinite(values), axis=1))
    if bad_rows.size:
        row = int(bad_rows[0])
        raise TraceFormatError(f"{path}: line {row + 2}: missing or non-numeric field; "
                               f"last valid line {row + 1}")
    ticks = values[:, 0]
    if not np.array_equal(ticks, np.arange(len(df))):
        row = int(np.flatnonzero(ticks != np.arange(len(df)))[0])
        raise TraceFormatError(f"{path}: line {row + 2}: tick {ticks[row]} out of sequence; "
                               f"last valid line {row + 1}")
    labels = values[:, -1]
    if not np.all((labels == 0) | (labels == 1)):
        row = int(np.flatnonzero((labels != 0) & (labels != 1))[0])
        raise TraceFormatError(f"{path}: line {row + 2}: label must be 0 or 1; last valid line {row + 1}")
    if len(df) != meta["rows"]:
        raise TraceFormatError(f"{path}: expected {meta['rows']} rows, found {len(df)}; "
                               f"last valid line {len(df) + 1}")

    n_a = meta["n_actuators"]
    drift = meta.get("initial_drift")
    return Trace(
        episode_id=meta["episode_id"],
        injection_tick=int(meta["injection_tick"]),
        ticks=ticks.astype(np.int64),
        actuators=values[:, 1:1 + n_a].copy(),
        sensors=values[:, 1 + n_a:-1].copy(),
        labels=labels.astype(np.int8),
        outcome=Outcome(meta["outcome"]),
        attack=AttackVector(meta["attack"], source=meta.get("attack_source", "manual")),
        seed=int(meta["seed"]),
        base_configs=np.asarray(meta["base_configs"], dtype=float),
        shutdown_tick=meta["shutdown_tick"],
        tripped=list(meta["tripped"]),
        initial_drift=AttackVector(drift, source="drift") if drift is not None else None,
    )


# ============================================================================
# MANIFEST
# ============================================================================

@dataclass
class CampaignManifest:
    command: str
    seed: int
    config: Dict[str, Any]
    format_version: int = FORMAT_VERSION
    created_at: str = ""
    episodes: List[Dict[str, Any]] = field(default_factory=list)
    checkpoints: List[Dict[str, Any]] = field(default_factory=list)
    results: List[Dict[str, Any]] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.created_at:
            self.created_at = datetime.now(timezone.utc).isoformat(timespec="seconds")

    @staticmethod
    def _entry(root: str, path: str, **extra: Any) -> Dict[str, Any]:
        entry = {"path": os.path.relpath(path, root), "sha256": sha256_file(path)}
        entry.update(extra)
        return entry

    def add_episode(self, root: str, path: str, outcome: Outcome) -> None:
        self.episodes.append(self._entry(root, path, outcome=outcome.value))
        sidecar = sidecar_path(path)
        if os.path.exists(sidecar):
            self.results.append(self._entry(root, sidecar))

    def add_checkpoint(self, root: str, path: str, parent: Optional[str] = None) -> None:
        self.checkpoints.append(self._entry(root, path, parent=parent))

    def add_result(self, root: str, path: str) -> None:
        self.results.append(self._entry(root, path))

    def write(self, path: str) -> None:
        write_json(path, asdict(self))

    @classmethod
    def read(cls, path: str) -> "CampaignManifest":
        data = read_json(path)
        if data.get("format_version") != FORMAT_VERSION:
            raise ManifestError(f"{path}: unsupported format version {data.get('format_version')}")
        return cls(**data)

    def verify(self, root: str) -> None:
        """Raise ManifestError if any referenced file is missing or its digest changed."""
        for entry in self.episodes + self.checkpoints + self.results:
            full = os.path.join(root, entry["path"])
            if not os.path.exists(full):
                raise ManifestError(f"missing file {entry['path']}")
            digest = sha256_file(full)
            if digest != entry["sha256"]:
                raise ManifestError(f"digest mismatch for {entry['path']}")


# ============================================================================
# METRICS
# ============================================================================

@dataclass
class MetricsReport:
    split: str = "all"
    n_samples: int = 0
    accuracy: float = math.nan
    precision: float = math.nan
    recall: float = math.nan
    f1: float = math.nan
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0
    n_effective: int = 0
    n_ineffective: int = 0
    detection_rate: float = math.nan
    false_alarm_rate: float = math.nan

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def compute_metrics(
    predictions: Sequence[int],
    labels: Sequence[int],
    decisions: Optional[Sequence[bool]] = None,
    outcomes: Optional[Sequence[Outcome]] = None,
    split: str = "all",
) -> MetricsReport:
    """
    Window-level confusion metrics plus trace-level detection / false-alarm rates.

    decisions[i] is True when trace i was judged under attack; ExcludedShort traces are ignored.
    """
    pred = np.asarray(predictions, dtype=int).reshape(-1)
    true = np.asarray(labels, dtype=int).reshape(-1)
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    report = MetricsReport(split=split, n_samples=int(pred.size))
    if pred.size:
        tn, fp, fn, tp = confusion_matrix(true, pred, labels=[0, 1]).ravel()
        report.tp, report.fp, report.tn, report.fn = int(tp), int(fp), int(tn), int(fn)
        report.accuracy = float(accuracy_score(true, pred))
        report.precision = float(precision_score(true, pred, labels=[0, 1], zero_division=0))
        report.recall = float(recall_score(true, pred, labels=[0, 1], zero_division=0))
        report.f1 = float(f1_score(true, pred, labels=[0, 1], zero_division=0))

    if decisions is not None and outcomes is not None:
        if len(decisions) != len(outcomes):
            raise ValueError(f"{len(decisions)} decisions for {len(outcomes)} traces")
        eff = [bool(d) for d, o in zip(decisions, outcomes) if o is Outcome.EFFECTIVE]
        ineff = [bool(d) for d, o in zip(decisions, outcomes) if o is Outcome.INEFFECTIVE]
        report.n_effective, report.n_ineffective = len(eff), len(ineff)
        report.detection_rate = sum(eff) / len(eff) if eff else math.nan
        report.false_alarm_rate = sum(ineff) / len(ineff) if ineff else math.nan
    return report


def metrics_table(reports: Iterable[MetricsReport], **columns: Any) -> pd.DataFrame:
    df = pd.DataFrame([r.to_dict() for r in reports])
    for name, value in columns.items():
        df.insert(0, name, value)
    return df


# ============================================================================
# ARCHIVES, SAMPLES, DISCOVERY
# ============================================================================

def write_archive(embeddings: np.ndarray, meta: Sequence[Mapping[str, Any]], path: str) -> None:
    """Embedding archive CSV: one row per injected attack, metadata columns first."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
    width = embeddings.shape[1] if embeddings.size else 0
    df = pd.DataFrame(list(meta)) if meta else pd.DataFrame(index=range(0))
    emb = pd.DataFrame(embeddings if embeddings.size else np.zeros((0, 0)),
                       columns=[f"e_{i}" for i in range(width)])
    write_table(pd.concat([df.reset_index(drop=True), emb], axis=1), path)


def read_archive(path: str) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def write_samples(samples: Sequence[Any], path: str) -> None:
    """Misclassified-batch CSV: flattened raw window, label, error class, round."""
    if not samples:
        pd.DataFrame(columns=["label", "error_class", "round_id"]).to_csv(path, index=False)
        return
    x = np.vstack([s.features for s in samples])
    df = pd.DataFrame(x, columns=[f"f_{i}" for i in range(x.shape[1])])
    df["label"] = [int(s.label) for s in samples]
    df["error_class"] = [s.error_class for s in samples]
    df["round_id"] = [int(s.round_id) for s in samples]
    write_table(df, path)


MULTIPLICITY_NAMES = {1: "single", 2: "double", 3: "triple", 4: "quadruple"}


def discovery_report(traces: Sequence[Trace], sensor_names: Sequence[str]) -> pd.DataFrame:
    """
    Attack discovery summary per attack source (plus an 'all' row): outcome counts,
    multiplicity histogram of Effective attacks, and which sensors tripped.
    """
    rows = []
    sources = sorted({t.attack.source for t in traces})
    for source in sources + ["all"]:
        group = [t for t in traces if source == "all" or t.attack.source == source]
        row: Dict[str, Any] = {"source": source, "total": len(group)}
        for outcome in Outcome:
            row[outcome.value] = sum(t.outcome is outcome for t in group)
        effective = [t for t in group if t.outcome is Outcome.EFFECTIVE]
        for t in effective:
            n = t.attack.multiplicity()
            key = "mult_" + MULTIPLICITY_NAMES.get(n, f"{n}x")
            row[key] = row.get(key, 0) + 1
        for i, name in enumerate(sensor_names):
            row[f"trip_{name}"] = sum(i in t.tripped for t in effective)
        rows.append(row)
    return pd.DataFrame(rows).fillna(0)
