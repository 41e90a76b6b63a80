# shield.py - sliding-window anomaly detector and its incremental training
"""
The Shield judges a trace window by window, harvests the windows it got wrong,
keeps a bounded replay set of exemplars, and retrains with a class-balanced
loss and continual backpropagation.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from attack_vector import SlotLayout
from data_guard import DivergenceGuard
from indicators import longest_run
from nn import (MlpModel, ShapeError, TrainConfig, backward, balanced_bce_loss, cbp_step,
                extract_features, forward, init_model, load_checkpoint, predict,
                save_checkpoint, sgd_step)
from plant import NominalProfile, Trace
from predictor import PredictorModel, predict_trace

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7


class Decision(str, Enum):
    ATTACK = "Attack"
    NO_ATTACK = "NoAttack"


class ErrorClass(str, Enum):
    PREMATURE = "premature"             # alarm on a window entirely before injection
    FALSE_NEGATIVE = "false_negative"   # missed abnormal window
    FALSE_POSITIVE = "false_positive"   # alarm after an attack that did nothing


@dataclass(frozen=True)
class DetectorSpec:
    width: int
    stride: int
    hidden: Tuple[int, ...]
    n_features: int
    feature_clip: float = 20.0
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.width < 1 or self.stride < 1:
            raise ValueError("detector width and stride must be >= 1")

    @property
    def input_size(self) -> int:
        return self.width * self.n_features

    def window_count(self, length: int) -> int:
        if length < self.width:
            return 0
        return (length - self.width) // self.stride + 1

    def window_starts(self, length: int) -> np.ndarray:
        return np.arange(self.window_count(length)) * self.stride

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], layout: SlotLayout) -> "DetectorSpec":
        d = cfg["detector"]
        return cls(int(d["width"]), int(d["stride"]), tuple(int(h) for h in d["hidden"]),
                   layout.n_actuators + layout.n_sensors, float(d["feature_clip"]),
                   float(d["holdout_fraction"]))


@dataclass
class Detector:
    """Binary MLP over z-scored windows (scaled against the golden nominal trace)."""

    model: MlpModel
    spec: DetectorSpec
    mean: np.ndarray
    sigma: np.ndarray

    def normalize(self, windows: np.ndarray) -> np.ndarray:
        """Raw windows (n, W * F) or (n, W, F) -> clipped z-scores, flattened."""
        w = np.asarray(windows, dtype=float).reshape(-1, self.spec.width, self.spec.n_features)
        z = np.clip((w - self.mean) / self.sigma, -self.spec.feature_clip, self.spec.feature_clip)
        return z.reshape(w.shape[0], -1)

    def probabilities(self, windows: np.ndarray) -> np.ndarray:
        if len(windows) == 0:
            return np.zeros(0)
        return predict(self.model, self.normalize(windows))[:, 0]

    def copy(self) -> "Detector":
        return Detector(self.model.copy(), self.spec, self.mean.copy(), self.sigma.copy())


@dataclass
class Sample:
    features: np.ndarray    # raw flattened W_d x (actuators + sensors) window
    label: int
    error_class: str = ""
    round_id: int = -1


@dataclass
class MisclassifiedBatch:
    samples: List[Sample] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def error_classes(self) -> List[str]:
        return sorted(k for k, v in self.counts.items() if v > 0)


@dataclass
class ExemplarSet:
    capacity: int
    samples: List[Sample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class EndToEndRule:
    segment_len: int
    consecutive_required: int

    def __post_init__(self):
        if self.segment_len < 1:
            raise ValueError("segment_len must be >= 1")
        if self.consecutive_required < 1:
            raise ValueError("consecutive_required must be >= 1")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "EndToEndRule":
        e = cfg["end_to_end"]
        return cls(int(e["segment_len"]), int(e["consecutive_required"]))


@dataclass(frozen=True)
class Toggles:
    cbl: bool = True
    exe: bool = True
    cbp: bool = True

    @classmethod
    def from_config(cls, d: Mapping[str, bool]) -> "Toggles":
        return cls(bool(d["cbl"]), bool(d["exe"]), bool(d["cbp"]))

    @classmethod
    def parse(cls, text: str) -> "Toggles":
        """'cbl,exe' -> cbl and exe on, cbp off; '' or 'none' -> all off."""
        names = {t.strip().lower() for t in text.split(",") if t.strip()} - {"none"}
        unknown = names - {"cbl", "exe", "cbp"}
        if unknown:
            raise ValueError(f"unknown toggles: {sorted(unknown)}")
        return cls("cbl" in names, "exe" in names, "cbp" in names)

    @classmethod
    def all_combinations(cls) -> List["Toggles"]:
        """Baseline, single modules, pairs, full (8 configs)."""
        combos = [cls(*bits) for bits in product([False, True], repeat=3)]
        return sorted(combos, key=lambda t: (t.cbl + t.exe + t.cbp, not t.cbl, not t.exe, not t.cbp))

    @property
    def label(self) -> str:
        on = [n for n in ("cbl", "exe", "cbp") if getattr(self, n)]
        if not on:
            return "baseline"
        return "full" if len(on) == 3 else "+".join(on)

    def to_dict(self) -> Dict[str, bool]:
        return {"cbl": self.cbl, "exe": self.exe, "cbp": self.cbp}


@dataclass
class RoundTraining:
    detector: Detector
    trained: bool = False
    diverged: bool = False
    epochs: int = 0
    best_loss: float = math.nan
    n_samples: int = 0


def init_detector(spec: DetectorSpec, profile: NominalProfile, seed: int) -> Detector:
    """Randomly initialized binary MLP with golden-trace normalization stats."""
    model = init_model([spec.input_size, *spec.hidden, 1], seed=seed)
    mean = np.concatenate([profile.actuator_mean, profile.sensor_mean])
    sigma = np.concatenate([profile.actuator_sigma, profile.sensor_sigma])
    return Detector(model, spec, mean, sigma)


# ============================================================================
# JUDGING
# ============================================================================

def trace_windows(trace: Trace, spec: DetectorSpec) -> np.ndarray:
    """Raw windows (n, W, F) at every stride position."""
    feats = trace.features()
    starts = spec.window_starts(len(trace))
    if starts.size == 0:
        return np.zeros((0, spec.width, spec.n_features))
    if feats.shape[1] != spec.n_features:
        raise ShapeError(f"trace has {feats.shape[1]} features, detector expects {spec.n_features}")
    views = np.lib.stride_tricks.sliding_window_view(feats, spec.width, axis=0)
    return np.transpose(views[starts], (0, 2, 1))


def window_labels(trace: Trace, spec: DetectorSpec) -> np.ndarray:
    """A window is abnormal iff any tick it covers is abnormal."""
    starts = spec.window_starts(len(trace))
    csum = np.concatenate([[0], np.cumsum(trace.labels, dtype=np.int64)])
    return ((csum[starts + spec.width] - csum[starts]) > 0).astype(np.int8)


def judge_trace(detector: Detector, trace: Trace) -> np.ndarray:
    """One verdict per window position (1 = abnormal at sigmoid >= 0.5)."""
    if len(trace) < detector.spec.width:
        logger.warning(f"[WARN] trace {trace.episode_id} has {len(trace)} ticks "
                       f"< detector width {detector.spec.width}; no verdicts")
        return np.zeros(0, dtype=np.int8)
    probs = detector.probabilities(trace_windows(trace, detector.spec))
    return (probs >= 0.5).astype(np.int8)


def collect_misclassified(verdicts: np.ndarray, trace: Trace, spec: DetectorSpec,
                          round_id: int = -1) -> MisclassifiedBatch:
    """Windows whose verdict disagrees with the window label, stored with their true label."""
    verdicts = np.asarray(verdicts, dtype=np.int8)
    labels = window_labels(trace, spec)
    if verdicts.shape != labels.shape:
        raise ValueError(f"{verdicts.size} verdicts for {labels.size} windows")
    wrong = np.flatnonzero(verdicts != labels)
    batch = MisclassifiedBatch(counts={e.value: 0 for e in ErrorClass})
    if wrong.size == 0:
        return batch
    windows = trace_windows(trace, spec)
    starts = spec.window_starts(len(trace))
    for i in wrong:
        if labels[i] == 1:
            kind = ErrorClass.FALSE_NEGATIVE
        elif starts[i] + spec.width <= trace.injection_tick:
            kind = ErrorClass.PREMATURE
        else:
            kind = ErrorClass.FALSE_POSITIVE
        batch.counts[kind.value] += 1
        batch.samples.append(Sample(windows[i].reshape(-1).copy(), int(labels[i]), kind.value, round_id))
    return batch


def segment_flags(verdicts: np.ndarray, rule: EndToEndRule, stride: int = 1) -> np.ndarray:
    """Group max(1, segment_len // stride) consecutive verdicts; a segment is anomalous on a strict majority."""
    verdicts = np.asarray(verdicts, dtype=np.int64)
    per_segment = max(1, rule.segment_len // stride)
    flags = []
    for k in range(0, verdicts.size, per_segment):
        seg = verdicts[k:k + per_segment]
        flags.append(2 * int(seg.sum()) > seg.size)
    return np.asarray(flags, dtype=bool)


def end_to_end_decide(verdicts: np.ndarray, rule: EndToEndRule, stride: int = 1) -> Decision:
    """Attack iff a run of >= C consecutive anomalous segments exists."""
    if longest_run(segment_flags(verdicts, rule, stride)) >= rule.consecutive_required:
        return Decision.ATTACK
    return Decision.NO_ATTACK


# ============================================================================
# EXEMPLARS + TRAINING
# ============================================================================

def select_exemplars(candidates: Sequence[Sample], detector: Detector, capacity: int) -> ExemplarSet:
    """
    Rank candidates by feature distance to their mean feature and keep every k-th
    (k = ceil(N / capacity)); ties keep insertion order.
    """
    candidates = list(candidates)
    if len(candidates) <= capacity:
        return ExemplarSet(capacity, candidates)
    x = detector.normalize(np.vstack([s.features for s in candidates]))
    feats = np.atleast_2d(extract_features(detector.model, x))
    dist = np.linalg.norm(feats - feats.mean(axis=0), axis=1)
    order = np.argsort(dist, kind="stable")
    k = math.ceil(len(candidates) / capacity)
    return ExemplarSet(capacity, [candidates[i] for i in order[::k][:capacity]])


def sample_accuracy(detector: Detector, samples: Sequence[Sample]) -> float:
    if not samples:
        return math.nan
    probs = detector.probabilities(np.vstack([s.features for s in samples]))
    labels = np.asarray([s.label for s in samples])
    return float(np.mean((probs >= 0.5).astype(int) == labels))


def _holdout_loss(model: MlpModel, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    p = np.clip(predict(model, x)[:, 0], PROB_EPS, 1.0 - PROB_EPS)
    loss, _ = balanced_bce_loss(p, y, lam, len(y))
    return loss


def train_round(detector: Detector, misclassified: Sequence[Sample], exemplars: Sequence[Sample],
                config: TrainConfig, toggles: Toggles, seed: int) -> RoundTraining:
    """
    One retraining round on harvested windows (plus exemplars when EXE is on).

    Minibatch SGD on the balanced loss (lambda 0 without CBL), CBP bookkeeping per
    example with CBP, early stopping on a held-out slice. A diverging round hands
    back the untouched pre-round detector.
    """
    data = list(misclassified) + (list(exemplars) if toggles.exe else [])
    if not data:
        return RoundTraining(detector)

    x = detector.normalize(np.vstack([s.features for s in data]))
    y = np.asarray([s.label for s in data], dtype=float)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(data))
    n_hold = max(1, int(round(detector.spec.holdout_fraction * len(data)))) if len(data) >= 2 else 0
    hold_idx, train_idx = perm[:n_hold], perm[n_hold:]
    if n_hold == 0:
        hold_idx = train_idx
    lam = config.balance_lambda if toggles.cbl else 0.0

    model = detector.model.copy()
    guard = DivergenceGuard("shield")
    best_loss, best_model, stale, epochs = math.inf, model.copy(), 0, 0
    for epoch in range(config.max_epochs):
        epochs = epoch + 1
        order = rng.permutation(train_idx)
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, acts = forward(model, x[idx])
            p = np.clip(out[:, 0], PROB_EPS, 1.0 - PROB_EPS)
            loss, grad = balanced_bce_loss(p, y[idx], lam, idx.size)
            if not guard.on_loss(loss):
                break
            sgd_step(model, backward(model, acts, grad[:, None]), config.learning_rate)
            if toggles.cbp:
                cbp_step(model, acts, config)
        if guard.is_healthy():
            hold_loss = _holdout_loss(model, x[hold_idx], y[hold_idx], lam)
            guard.on_loss(hold_loss)
        if not guard.is_healthy():
            logger.warning(f"[WARN] shield round diverged ({guard.reason}); reverting to pre-round detector")
            return RoundTraining(detector, trained=False, diverged=True, epochs=epochs, n_samples=len(data))
        if hold_loss < best_loss:
            best_loss, best_model, stale = hold_loss, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    trained = Detector(best_model, detector.spec, detector.mean, detector.sigma)
    return RoundTraining(trained, trained=True, epochs=epochs, best_loss=best_loss, n_samples=len(data))


# ============================================================================
# RESIDUAL BASELINE
# ============================================================================

def residual_scores(predictor: PredictorModel, trace: Trace, spec: DetectorSpec,
                    layout: SlotLayout) -> np.ndarray:
    """
    Per detector window: mean |forecast - observed| over critical sensors at the
    window's last tick, in the predictor's normalized units. NaN without enough history.
    """
    ends = spec.window_starts(len(trace)) + spec.width
    if ends.size == 0:
        return np.zeros(0)
    forecast = predict_trace(predictor, trace.predictor_features(layout), ends)
    observed = trace.sensors[ends - 1]
    diff = np.abs(forecast - observed) / predictor.target_norm.scale
    return diff.mean(axis=1)


def residual_baseline(predictor: PredictorModel, trace: Trace, threshold: float,
                      spec: DetectorSpec, layout: SlotLayout) -> np.ndarray:
    scores = residual_scores(predictor, trace, spec, layout)
    with np.errstate(invalid="ignore"):
        return np.where(np.isnan(scores), 0, scores > threshold).astype(np.int8)


def calibrate_threshold(predictor: PredictorModel, traces: Sequence[Trace], spec: DetectorSpec,
                        layout: SlotLayout, quantile: float = 99.5) -> float:
    """Threshold at the given percentile of residuals on nominal traces."""
    parts = [residual_scores(predictor, t, spec, layout) for t in traces]
    scores = np.concatenate(parts) if parts else np.zeros(0)
    scores = scores[~np.isnan(scores)]
    if scores.size == 0:
        logger.warning("[WARN] no residuals to calibrate on; baseline will never alarm")
        return math.inf
    return float(np.percentile(scores, quantile))


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_detector(detector: Detector, path: str) -> None:
    s = detector.spec
    save_checkpoint(detector.model, path, extra={
        "kind": "detector",
        "spec": {"width": s.width, "stride": s.stride, "hidden": list(s.hidden),
                 "n_features": s.n_features, "feature_clip": s.feature_clip,
                 "holdout_fraction": s.holdout_fraction},
        "mean": detector.mean.tolist(),
        "sigma": detector.sigma.tolist(),
    })


def load_detector(path: str) -> Detector:
    model, extra = load_checkpoint(path)
    if extra.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    spec = dict(extra["spec"])
    spec["hidden"] = tuple(spec["hidden"])
    return Detector(model, DetectorSpec(**spec), np.asarray(extra["mean"], dtype=float),
                    np.asarray(extra["sigma"], dtype=float))
