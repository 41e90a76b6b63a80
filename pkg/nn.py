# nn.py - dense network core shared by the predictor and the detector
"""
Small numpy MLP with hand-derived gradients, a class-balanced BCE loss and
continual backpropagation (utility tracking + replacement of low-utility neurons).

Weights are stored (fan_in, fan_out) so a batch forward is x @ W + b.
`forward` returns every post-activation, [input, hidden_1, ..., output], which
`backward`, `cbp_step` and `extract_features` consume.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input width does not match the model."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class Activation(str, Enum):
    RELU = "relu"
    IDENTITY = "identity"
    SIGMOID = "sigmoid"


def _activate(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    if kind is Activation.SIGMOID:
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _derivative(h: np.ndarray, kind: Activation) -> np.ndarray:
    """Derivative expressed through the post-activation value h."""
    if kind is Activation.RELU:
        return (h > 0).astype(float)
    if kind is Activation.SIGMOID:
        return h * (1.0 - h)
    return np.ones_like(h)


@dataclass
class Layer:
    weights: np.ndarray
    biases: np.ndarray
    activation: Activation


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    balance_lambda: float = 1.0
    utility_decay: float = 0.99
    replacement_rate: float = 1e-3
    max_epochs: int = 20
    patience: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.balance_lambda < 0:
            raise ValueError("balance_lambda must be >= 0")
        if not 0 < self.utility_decay < 1:
            raise ValueError("utility_decay must be in (0, 1)")
        if not 0 < self.replacement_rate < 1:
            raise ValueError("replacement_rate must be in (0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "TrainConfig":
        return cls(**{k: section[k] for k in section if k in cls.__dataclass_fields__})


@dataclass
class MlpModel:
    layers: List[Layer]
    utilities: List[np.ndarray]
    replace_counters: np.ndarray
    seed: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng, repr=False)
    replacements: int = 0

    @property
    def input_size(self) -> int:
        return int(self.layers[0].weights.shape[0])

    @property
    def output_size(self) -> int:
        return int(self.layers[-1].weights.shape[1])

    @property
    def sizes(self) -> List[int]:
        return [self.input_size] + [int(layer.weights.shape[1]) for layer in self.layers]

    @property
    def feature_size(self) -> int:
        return self.sizes[-2]

    def copy(self) -> "MlpModel":
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = self.rng.bit_generator.state
        return MlpModel(
            layers=[Layer(l.weights.copy(), l.biases.copy(), l.activation) for l in self.layers],
            utilities=[u.copy() for u in self.utilities],
            replace_counters=self.replace_counters.copy(),
            seed=self.seed,
            rng=rng,
            replacements=self.replacements,
        )


@dataclass
class Gradients:
    weights: List[np.ndarray]
    biases: List[np.ndarray]


def init_model(sizes: Sequence[int], output_activation: Activation = Activation.SIGMOID,
               hidden_activation: Activation = Activation.RELU, seed: int = 0) -> MlpModel:
    """
    Fresh model with fan-in uniform weights in [-1/sqrt(fan_in), +1/sqrt(fan_in)] and zero biases.

    Args:
        sizes: [input, hidden..., output]
    """
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise ShapeError(f"invalid layer sizes {list(sizes)}")
    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        act = output_activation if i == len(sizes) - 2 else hidden_activation
        layers.append(Layer(rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out), act))
    hidden = list(sizes[1:-1])
    return MlpModel(
        layers=layers,
        utilities=[np.zeros(w) for w in hidden],
        replace_counters=np.zeros(len(hidden)),
        seed=seed,
        rng=rng,
    )


def forward(model: MlpModel, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Forward pass for one example (1-D) or a batch (2-D, one row per example).

    Returns:
        (output, activations) with activations = [x, h_1, ..., output]
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.input_size:
        raise ShapeError(f"input width {x.shape[-1]} != model input {model.input_size}")
    activations = [x]
    h = x
    for layer in model.layers:
        h = _activate(h @ layer.weights + layer.biases, layer.activation)
        activations.append(h)
    return h, activations


def predict(model: MlpModel, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """Batched forward on a 2-D array, outputs only."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        return np.zeros((0, model.output_size))
    outs = [forward(model, x[i:i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
    return np.vstack(outs)


def extract_features(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Penultimate-layer activations (the layer feeding the output head)."""
    _, activations = forward(model, x)
    return activations[-2]


def balanced_bce_loss(predictions: np.ndarray, labels: np.ndarray, lam: float,
                      batch_size: Optional[int] = None) -> Tuple[float, np.ndarray]:
    """
    Mean BCE plus (lam / B) * |C_normal - C_abnormal|.

    C_normal / C_abnormal count correct predictions per class at threshold 0.5.
    The penalty is piecewise constant, so the returned gradient is the BCE gradient only.

    Raises:
        ValueError if a prediction is outside (0, 1) or lengths differ.
    """
    p = np.asarray(predictions, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"predictions ({p.size}) and labels ({y.size}) differ in length")
    if p.size == 0:
        raise ValueError("empty batch")
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise ValueError("predictions must lie strictly inside (0, 1)")
    b = p.size if batch_size is None else int(batch_size)

    bce = float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))
    grad = (p - y) / (p * (1.0 - p)) / p.size
    if lam == 0:
        return bce, grad

    predicted_abnormal = p >= 0.5
    c_normal = int(np.sum((y == 0) & ~predicted_abnormal))
    c_abnormal = int(np.sum((y == 1) & predicted_abnormal))
    return bce + (lam / b) * abs(c_normal - c_abnormal), grad


def mse_loss(predictions: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient."""
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(targets, dtype=float)
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} != target shape {t.shape}")
    diff = p - t
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def backward(model: MlpModel, activations: List[np.ndarray], loss_gradient: np.ndarray) -> Gradients:
    """Gradients of every weight and bias given dL/d(output)."""
    acts = [np.atleast_2d(a) for a in activations]
    delta = np.asarray(loss_gradient, dtype=float).reshape(acts[-1].shape)
    grads_w: List[np.ndarray] = [np.empty(0)] * len(model.layers)
    grads_b: List[np.ndarray] = [np.empty(0)] * len(model.layers)
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        delta = delta * _derivative(acts[i + 1], layer.activation)
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ layer.weights.T
    return Gradients(grads_w, grads_b)


def sgd_step(model: MlpModel, gradients: Gradients, learning_rate: float) -> MlpModel:
    for layer, gw, gb in zip(model.layers, gradients.weights, gradients.biases):
        layer.weights -= learning_rate * gw
        layer.biases -= learning_rate * gb
    return model


def cbp_step(model: MlpModel, activations: List[np.ndarray], config: TrainConfig) -> MlpModel:
    """
    Continual backpropagation bookkeeping for one example (batches are walked row by row).

    Per hidden layer j: decay utilities toward |h|, add n_inactive * rho to c_j,
    then while c_j > 1 reinitialize the lowest-utility neuron (smallest index on ties):
    fresh input weights, zero bias, zero output weights, zero utility.
    """
    hidden = activations[1:-1]
    if not hidden:
        return model
    rows = np.atleast_2d(hidden[0]).shape[0]
    eta, rho = config.utility_decay, config.replacement_rate
    for r in range(rows):
        for j, h_all in enumerate(hidden):
            h = np.atleast_2d(h_all)[r]
            u = model.utilities[j]
            u *= eta
            u += (1.0 - eta) * np.abs(h)
            model.replace_counters[j] += np.count_nonzero(h == 0) * rho
            while model.replace_counters[j] > 1:
                idx = int(np.argmin(u))
                incoming = model.layers[j]
                fan_in = incoming.weights.shape[0]
                bound = 1.0 / math.sqrt(fan_in)
                incoming.weights[:, idx] = model.rng.uniform(-bound, bound, fan_in)
                incoming.biases[idx] = 0.0
                model.layers[j + 1].weights[idx, :] = 0.0
                u[idx] = 0.0
                model.replace_counters[j] -= 1
                model.replacements += 1
    return model


# ============================================================================
# CHECKPOINTS
# ============================================================================

def model_to_dict(model: MlpModel) -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "sizes": model.sizes,
        "activations": [layer.activation.value for layer in model.layers],
        "weights": [layer.weights.tolist() for layer in model.layers],
        "biases": [layer.biases.tolist() for layer in model.layers],
        "utilities": [u.tolist() for u in model.utilities],
        "replace_counters": model.replace_counters.tolist(),
        "replacements": model.replacements,
        "seed": model.seed,
        "rng_state": model.rng.bit_generator.state,
    }


def model_from_dict(d: Mapping[str, Any]) -> MlpModel:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')}")
    layers = [
        Layer(np.asarray(w, dtype=float).reshape(fi, fo), np.asarray(b, dtype=float), Activation(a))
        for w, b, a, fi, fo in zip(d["weights"], d["biases"], d["activations"],
                                   d["sizes"][:-1], d["sizes"][1:])
    ]
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = d["rng_state"]
    return MlpModel(
        layers=layers,
        utilities=[np.asarray(u, dtype=float) for u in d["utilities"]],
        replace_counters=np.asarray(d["replace_counters"], dtype=float),
        seed=int(d["seed"]),
        rng=rng,
        replacements=int(d.get("replacements", 0)),
    )


def save_checkpoint(model: MlpModel, path: str, extra: Optional[Mapping[str, Any]] = None) -> None:
    """JSON checkpoint; floats are written with repr so they read back bit-exactly."""
    payload = model_to_dict(model)
    payload["extra"] = dict(extra or {})
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, sort_keys=True)


def load_checkpoint(path: str) -> Tuple[MlpModel, Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    return model_from_dict(payload), payload.get("extra", {})


def models_equal(a: MlpModel, b: MlpModel) -> bool:
    """Bit-exact comparison of weights, utilities and counters."""
    if a.sizes != b.sizes:
        return False
    for la, lb in zip(a.layers, b.layers):
        if la.activation != lb.activation:
            return False
        if not (np.array_equal(la.weights, lb.weights) and np.array_equal(la.biases, lb.biases)):
            return False
    return (all(np.array_equal(x, y) for x, y in zip(a.utilities, b.utilities))
            and np.array_equal(a.replace_counters, b.replace_counters))
