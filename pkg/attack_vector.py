# attack_vector.py - attack vectors and the manipulable-slot layout
"""
An attack vector holds one delta per manipulable variable, laid out as
sensors, then actuators, then configs. A slot equal to 0.0 leaves its
variable untouched.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class AttackShapeError(ValueError):
    """Attack vector length does not match the plant's slot layout."""


@dataclass(frozen=True)
class SlotLayout:
    n_sensors: int
    n_actuators: int
    n_configs: int

    @property
    def size(self) -> int:
        return self.n_sensors + self.n_actuators + self.n_configs

    @property
    def signal_slots(self) -> int:
        """Sensor + actuator slots (the ones drift may touch)."""
        return self.n_sensors + self.n_actuators

    def split(self, deltas: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (sensor, actuator, config) views of a full-length vector."""
        if len(deltas) != self.size:
            raise AttackShapeError(f"attack length {len(deltas)} != {self.size}")
        s_end = self.n_sensors
        a_end = s_end + self.n_actuators
        return deltas[:s_end], deltas[s_end:a_end], deltas[a_end:]


@dataclass
class AttackVector:
    deltas: np.ndarray
    source: str = "manual"   # ga | random | drift | manual

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=float).copy()

    @classmethod
    def zeros(cls, layout: SlotLayout, source: str = "manual") -> "AttackVector":
        return cls(np.zeros(layout.size), source=source)

    @property
    def size(self) -> int:
        return int(self.deltas.shape[0])

    def nonzero_slots(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.deltas)]

    def multiplicity(self) -> int:
        return int(np.count_nonzero(self.deltas))

    def is_zero(self) -> bool:
        return self.multiplicity() == 0

    def to_list(self) -> List[float]:
        return [float(x) for x in self.deltas]

    def check(self, layout: SlotLayout) -> None:
        if self.size != layout.size:
            raise AttackShapeError(
                f"attack vector has {self.size} slots, plant expects {layout.size} "
                f"({layout.n_sensors} sensors + {layout.n_actuators} actuators + {layout.n_configs} configs)"
            )


@dataclass(frozen=True)
class SlotBounds:
    """Per-slot [min_delta, max_delta]."""

    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    @classmethod
    def for_plant(
        cls,
        nominal_configs: Sequence[float],
        sensor_sigma: Sequence[float],
        actuator_sigma: Sequence[float],
        config_factor: float,
        signal_sigmas: float,
    ) -> "SlotBounds":
        """Configs within +/- factor * |nominal|; sensor/actuator biases within +/- k * sigma."""
        span = np.concatenate([
            signal_sigmas * np.asarray(sensor_sigma, dtype=float),
            signal_sigmas * np.asarray(actuator_sigma, dtype=float),
            config_factor * np.abs(np.asarray(nominal_configs, dtype=float)),
        ])
        return cls(lower=-span, upper=span.copy())

    @property
    def range(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, v: AttackVector, atol: float = 0.0) -> bool:
        """True iff every slot lies within its bounds (zero slots always do when 0 is inside)."""
        d = v.deltas
        return bool(np.all(d >= self.lower - atol) and np.all(d <= self.upper + atol))

    def clamp(self, deltas: np.ndarray) -> np.ndarray:
        return np.clip(deltas, self.lower, self.upper)
