# predictor.py - windowed forecaster of critical sensors (guides the Spear)
"""
A dense network mapping the last W_p ticks of plant features (sensors,
actuators, configs, in attack slot order) to the critical sensor readings
H_p ticks ahead. Its penultimate layer doubles as the attack embedding used
by coverage fitness.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from attack_vector import AttackVector, SlotLayout
from data_guard import DivergenceGuard
from nn import (Activation, MlpModel, ShapeError, TrainConfig, TrainingDivergedError,
                backward, extract_features, forward, init_model, load_checkpoint, mse_loss,
                predict, save_checkpoint, sgd_step)
from plant import Trace

logger = logging.getLogger(__name__)

MIN_EPISODES = 30


@dataclass(frozen=True)
class WindowSpec:
    width: int
    horizon: int
    n_features: int
    n_targets: int

    def __post_init__(self):
        if self.width < 1 or self.horizon < 1:
            raise ValueError("window width and horizon must be >= 1")

    @property
    def input_size(self) -> int:
        return self.width * self.n_features

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], layout: SlotLayout) -> "WindowSpec":
        p = cfg["predictor"]
        return cls(int(p["width"]), int(p["horizon"]), layout.size, layout.n_sensors)


@dataclass
class Normalizer:
    """Per-column min-max scaling; zero-range columns use a unit scale."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Normalizer":
        values = np.asarray(values, dtype=float)
        return cls(values.min(axis=0), values.max(axis=0))

    @property
    def scale(self) -> np.ndarray:
        span = self.hi - self.lo
        return np.where(span == 0, 1.0, span)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.lo) / self.scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.scale + self.lo

    def to_dict(self) -> Dict[str, List[float]]:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[float]]) -> "Normalizer":
        return cls(np.asarray(d["lo"], dtype=float), np.asarray(d["hi"], dtype=float))


@dataclass
class WindowSet:
    x: np.ndarray       # (n, W * F) normalized
    y: np.ndarray       # (n, n_targets) normalized

    def __len__(self) -> int:
        return int(self.x.shape[0])


@dataclass
class PredictorDataset:
    window: WindowSpec
    train: WindowSet
    validation: WindowSet
    feature_norm: Normalizer
    target_norm: Normalizer
    split: Dict[str, str]
    skipped: int = 0


@dataclass
class PredictorModel:
    model: MlpModel
    window: WindowSpec
    feature_norm: Normalizer
    target_norm: Normalizer
    history: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def embedding_size(self) -> int:
        return self.model.feature_size


def raw_windows(features: np.ndarray, window: WindowSpec, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sliding windows of `width` ticks paired with sensors `horizon` ticks after the window.

    Returns:
        (x, y) with x (n, W, F) and y (n, n_targets); n = len - W - H + 1 when stride is 1
    """
    count = features.shape[0] - window.width - window.horizon + 1
    if count <= 0:
        return (np.zeros((0, window.width, features.shape[1])),
                np.zeros((0, window.n_targets)))
    views = np.lib.stride_tricks.sliding_window_view(features, window.width, axis=0)
    starts = np.arange(0, count, stride)
    x = np.transpose(views[starts], (0, 2, 1))
    y = features[starts + window.width + window.horizon - 1, :window.n_targets]
    return x, y


def split_episodes(episode_ids: Sequence[str], seed: int, train_fraction: float = 0.8) -> Dict[str, str]:
    """Seeded 80/20 split by episode; ceil on train, at least one validation episode when n >= 2."""
    n = len(episode_ids)
    n_train = math.ceil(train_fraction * n)
    if n >= 2:
        n_train = min(n_train, n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return {episode_ids[i]: ("train" if rank < n_train else "validation") for rank, i in enumerate(order)}


def build_dataset(traces: Sequence[Trace], window: WindowSpec, layout: SlotLayout, seed: int,
                  stride: int = 1) -> PredictorDataset:
    """
    Window pairs from nominal and perturbed episodes, normalized on train only.

    Episodes shorter than W_p + H_p are skipped and counted.
    """
    if len(traces) < MIN_EPISODES:
        logger.warning(f"[WARN] predictor dataset built from {len(traces)} episodes (< {MIN_EPISODES})")
    usable = [t for t in traces if len(t) >= window.width + window.horizon]
    skipped = len(traces) - len(usable)
    if skipped:
        logger.warning(f"[SKIP] {skipped} episode(s) shorter than {window.width + window.horizon} ticks")
    if not usable:
        raise ValueError("no episode long enough to form a predictor window")

    split = split_episodes([t.episode_id for t in usable], seed)
    parts: Dict[str, List[Tuple[np.ndarray, np.ndarray]]] = {"train": [], "validation": []}
    train_feats = []
    for t in usable:
        feats = t.predictor_features(layout)
        x, y = raw_windows(feats, window, stride)
        parts[split[t.episode_id]].append((x, y))
        if split[t.episode_id] == "train":
            train_feats.append(feats)

    feature_norm = Normalizer.fit(np.vstack(train_feats))
    target_norm = Normalizer.fit(np.vstack(train_feats)[:, :window.n_targets])

    def assemble(chunks: List[Tuple[np.ndarray, np.ndarray]]) -> WindowSet:
        if not chunks:
            return WindowSet(np.zeros((0, window.input_size)), np.zeros((0, window.n_targets)))
        x = np.concatenate([c[0] for c in chunks])
        y = np.concatenate([c[1] for c in chunks])
        x = feature_norm.normalize(x).reshape(x.shape[0], -1)
        return WindowSet(x, target_norm.normalize(y))

    dataset = PredictorDataset(window, assemble(parts["train"]), assemble(parts["validation"]),
                               feature_norm, target_norm, split, skipped)
    logger.info(f"[OK] predictor dataset: {len(dataset.train)} train / "
                f"{len(dataset.validation)} validation windows")
    return dataset


def train_predictor(dataset: PredictorDataset, config: TrainConfig, hidden: Sequence[int],
                    seed: int) -> PredictorModel:
    """
    Minibatch SGD on MSE with early stopping on validation loss; returns the best epoch.

    Raises:
        TrainingDivergedError when a loss turns non-finite.
    """
    if len(dataset.train) == 0:
        raise ValueError("empty predictor training set")
    window = dataset.window
    model = init_model([window.input_size, *hidden, window.n_targets],
                       output_activation=Activation.IDENTITY, seed=seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    guard = DivergenceGuard("predictor")
    val = dataset.validation if len(dataset.validation) else dataset.train

    best_loss, best_model, stale = math.inf, model.copy(), 0
    history: List[Tuple[float, float]] = []
    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(dataset.train))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            out, acts = forward(model, dataset.train.x[idx])
            loss, grad = mse_loss(out, dataset.train.y[idx])
            if not guard.on_loss(loss):
                raise TrainingDivergedError(f"predictor training diverged in epoch {epoch}: {guard.reason}")
            sgd_step(model, backward(model, acts, grad), config.learning_rate)
            epoch_losses.append(loss)
        val_loss, _ = mse_loss(predict(model, val.x), val.y)
        train_loss = float(np.mean(epoch_losses))
        history.append((train_loss, val_loss))
        logger.info(f"predictor epoch {epoch + 1}/{config.max_epochs} train={train_loss:.5f} val={val_loss:.5f}")
        if val_loss < best_loss:
            best_loss, best_model, stale = val_loss, model.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"predictor early stop after epoch {epoch + 1}")
                break
    return PredictorModel(best_model, window, dataset.feature_norm, dataset.target_norm, history)


# ============================================================================
# INFERENCE
# ============================================================================

def _check_window(pm: PredictorModel, window: np.ndarray) -> np.ndarray:
    window = np.asarray(window, dtype=float)
    expected = (pm.window.width, pm.window.n_features)
    if window.shape != expected:
        raise ShapeError(f"window shape {window.shape} != {expected}")
    return window


def perturbed_inputs(pm: PredictorModel, window: np.ndarray, vectors: Sequence[AttackVector]) -> np.ndarray:
    """Normalized, flattened copies of the window with each attack's deltas added to every tick."""
    window = _check_window(pm, window)
    deltas = np.vstack([v.deltas for v in vectors])
    if deltas.shape[1] != pm.window.n_features:
        raise ShapeError(f"attack length {deltas.shape[1]} != {pm.window.n_features}")
    stacked = window[None, :, :] + deltas[:, None, :]
    return pm.feature_norm.normalize(stacked).reshape(len(vectors), -1)


def predict_effects(pm: PredictorModel, window: np.ndarray, vectors: Sequence[AttackVector]) -> np.ndarray:
    """Forecast critical sensors (physical units) for each attack, one row per vector."""
    out = predict(pm.model, perturbed_inputs(pm, window, vectors))
    return pm.target_norm.denormalize(out)


def predict_effect(pm: PredictorModel, window: np.ndarray, v: AttackVector) -> np.ndarray:
    return predict_effects(pm, window, [v])[0]


def embed_many(pm: PredictorModel, window: np.ndarray, vectors: Sequence[AttackVector]) -> np.ndarray:
    return np.atleast_2d(extract_features(pm.model, perturbed_inputs(pm, window, vectors)))


def embed(pm: PredictorModel, window: np.ndarray, v: AttackVector) -> np.ndarray:
    return embed_many(pm, window, [v])[0]


def predict_trace(pm: PredictorModel, features: np.ndarray, ends: Sequence[int]) -> np.ndarray:
    """
    Forecast the sensors at tick `end - 1` for each end, from the window ending H_p ticks earlier.

    Ends without enough history give NaN rows.
    """
    w, h = pm.window.width, pm.window.horizon
    out = np.full((len(ends), pm.window.n_targets), np.nan)
    valid = [i for i, e in enumerate(ends) if e - h - w >= 0]
    if not valid:
        return out
    x = np.stack([features[ends[i] - h - w:ends[i] - h] for i in valid])
    z = pm.feature_norm.normalize(x).reshape(len(valid), -1)
    out[valid] = pm.target_norm.denormalize(predict(pm.model, z))
    return out


# ============================================================================
# CHECKPOINTS
# ============================================================================

def save_predictor(pm: PredictorModel, path: str) -> None:
    save_checkpoint(pm.model, path, extra={
        "kind": "predictor",
        "window": {"width": pm.window.width, "horizon": pm.window.horizon,
                   "n_features": pm.window.n_features, "n_targets": pm.window.n_targets},
        "feature_norm": pm.feature_norm.to_dict(),
        "target_norm": pm.target_norm.to_dict(),
        "history": [list(h) for h in pm.history],
    })


def load_predictor(path: str) -> PredictorModel:
    model, extra = load_checkpoint(path)
    if extra.get("kind") != "predictor":
        raise ValueError(f"{path} is not a predictor checkpoint")
    return PredictorModel(
        model=model,
        window=WindowSpec(**extra["window"]),
        feature_norm=Normalizer.from_dict(extra["feature_norm"]),
        target_norm=Normalizer.from_dict(extra["target_norm"]),
        history=[tuple(h) for h in extra.get("history", [])],
    )
