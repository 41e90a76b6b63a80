# plant.py - two-tank cascade process plant with safety interlocks
"""
Desk-scale CPS under test.

Supply -> feed valve (slave PI on feed flow) -> tank 2 -> gravity flow -> tank 1
-> outlet valve -> drain. The master PI holds the tank-1 level by setting the
feed-flow setpoint. Tank 1 is heated; a cooling pump removes heat.

Sensors:   level_1, level_2, feed_flow, temperature, pressure
Actuators: feed_valve, outlet_valve, cooling_pump
Configs:   kc_level, ti_level, kc_flow, ti_flow, sp_level, sp_outlet, sp_pump, sp_heat

Controllers only ever see `spoofed_sensors`; interlocks and labels use the true readings.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from attack_vector import AttackShapeError, AttackVector, SlotLayout
from indicators import nominal_stats

logger = logging.getLogger(__name__)

# config slot indices
KC_LEVEL, TI_LEVEL, KC_FLOW, TI_FLOW, SP_LEVEL, SP_OUTLET, SP_PUMP, SP_HEAT = range(8)


class Outcome(str, Enum):
    EFFECTIVE = "Effective"
    INEFFECTIVE = "Ineffective"
    EXCLUDED_SHORT = "ExcludedShort"


@dataclass(frozen=True)
class OdeParams:
    tank1_area: float
    tank2_area: float
    outlet_coeff: float
    intertank_coeff: float
    feed_max: float
    feed_bias: float
    valve_bias: float
    ti_floor: float
    inlet_temp: float
    coolant_temp: float
    heater_power: float
    cooling_coeff: float
    thermal_capacity: float
    min_thermal_level: float
    atm_pressure: float
    hydrostatic_gain: float
    thermal_pressure_gain: float
    reference_temp: float


@dataclass(frozen=True)
class NoiseParams:
    sensor: Tuple[float, ...]
    process_fraction: float = 0.0
    actuator_jitter: float = 0.0


@dataclass(frozen=True)
class PlantSpec:
    n_sensors: int
    n_actuators: int
    n_configs: int
    dt: float
    ode: OdeParams
    max_ticks: int
    warmup_ticks: int
    injection_tick: int
    nominal_configs: Tuple[float, ...]
    initial_levels: Tuple[float, float]
    initial_temp: float
    noise: NoiseParams
    sensor_names: Tuple[str, ...] = ()
    actuator_names: Tuple[str, ...] = ()
    config_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.n_sensors < 2:
            raise ValueError("plant needs at least 2 critical sensors")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0 (got {self.dt})")
        if self.max_ticks <= self.warmup_ticks:
            raise ValueError("max_ticks must exceed warmup_ticks")
        if len(self.nominal_configs) != self.n_configs:
            raise ValueError("nominal_configs length must equal n_configs")
        if len(self.noise.sensor) != self.n_sensors:
            raise ValueError("sensor noise needs one entry per sensor")

    @property
    def layout(self) -> SlotLayout:
        return SlotLayout(self.n_sensors, self.n_actuators, self.n_configs)

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "PlantSpec":
        p = cfg["plant"]
        noise = p["noise"]
        return cls(
            n_sensors=len(p["sensor_names"]),
            n_actuators=len(p["actuator_names"]),
            n_configs=len(p["config_names"]),
            dt=float(p["dt"]),
            ode=OdeParams(**{k: float(v) for k, v in p["ode"].items()}),
            max_ticks=int(p["max_ticks"]),
            warmup_ticks=int(p["warmup_ticks"]),
            injection_tick=int(p["injection_tick"]),
            nominal_configs=tuple(float(x) for x in p["nominal_configs"]),
            initial_levels=(float(p["initial_levels"][0]), float(p["initial_levels"][1])),
            initial_temp=float(p["initial_temp"]),
            noise=NoiseParams(
                sensor=tuple(float(x) for x in noise["sensor"]),
                process_fraction=float(noise["process_fraction"]),
                actuator_jitter=float(noise["actuator_jitter"]),
            ),
            sensor_names=tuple(p["sensor_names"]),
            actuator_names=tuple(p["actuator_names"]),
            config_names=tuple(p["config_names"]),
        )


@dataclass(frozen=True)
class SafetyEnvelope:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper):
            raise ValueError("envelope lower/upper lengths differ")
        for i, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if not hi > lo:
                raise ValueError(f"envelope[{i}]: upper {hi} must exceed lower {lo}")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "SafetyEnvelope":
        env = cfg["envelope"]
        return cls(tuple(float(x) for x in env["lower"]), tuple(float(x) for x in env["upper"]))

    @property
    def lower_arr(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def upper_arr(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    def violations(self, sensors: np.ndarray) -> List[int]:
        """Indices of sensors strictly outside [L_s, H_s]."""
        s = np.asarray(sensors, dtype=float)
        outside = (s < self.lower_arr) | (s > self.upper_arr)
        return [int(i) for i in np.flatnonzero(outside)]


@dataclass
class PlantState:
    tick: int
    actuators: np.ndarray
    sensors: np.ndarray
    spoofed_sensors: np.ndarray
    configs: np.ndarray
    shutdown: bool = False
    levels: np.ndarray = field(default_factory=lambda: np.zeros(2))
    temperature: float = 0.0
    integrals: np.ndarray = field(default_factory=lambda: np.zeros(2))
    sensor_bias: np.ndarray = field(default_factory=lambda: np.zeros(0))
    actuator_bias: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def copy(self) -> "PlantState":
        return replace(
            self,
            actuators=self.actuators.copy(),
            sensors=self.sensors.copy(),
            spoofed_sensors=self.spoofed_sensors.copy(),
            configs=self.configs.copy(),
            levels=self.levels.copy(),
            integrals=self.integrals.copy(),
            sensor_bias=self.sensor_bias.copy(),
            actuator_bias=self.actuator_bias.copy(),
        )


@dataclass
class Trace:
    """One recorded episode: true readings and actual actuator positions per tick."""

    episode_id: str
    injection_tick: int
    ticks: np.ndarray
    actuators: np.ndarray          # (T, n_actuators)
    sensors: np.ndarray            # (T, n_sensors)
    labels: np.ndarray             # (T,) 0 normal / 1 abnormal
    outcome: Outcome
    attack: AttackVector
    seed: int
    base_configs: np.ndarray
    shutdown_tick: Optional[int] = None
    tripped: List[int] = field(default_factory=list)
    initial_drift: Optional[AttackVector] = None

    def __len__(self) -> int:
        return int(self.ticks.shape[0])

    def features(self) -> np.ndarray:
        """Detector features per tick: actuators then sensors (configs excluded)."""
        return np.hstack([self.actuators, self.sensors])

    def configs_per_tick(self, layout: SlotLayout) -> np.ndarray:
        """Base configs plus drift/attack config deltas from the tick they were applied."""
        configs = np.tile(self.base_configs, (len(self), 1))
        if self.initial_drift is not None:
            configs += layout.split(self.initial_drift.deltas)[2]
        if self.injection_tick < len(self):
            configs[self.injection_tick:] += layout.split(self.attack.deltas)[2]
        return configs

    def predictor_features(self, layout: SlotLayout) -> np.ndarray:
        """Predictor features per tick: sensors, actuators, configs (attack slot order)."""
        return np.hstack([self.sensors, self.actuators, self.configs_per_tick(layout)])


@dataclass
class NominalProfile:
    """Per-variable mean and sigma of the golden nominal trace."""

    sensor_mean: np.ndarray
    sensor_sigma: np.ndarray
    actuator_mean: np.ndarray
    actuator_sigma: np.ndarray

    @property
    def signal_sigma(self) -> np.ndarray:
        """Sigmas in attack slot order (sensors then actuators)."""
        return np.concatenate([self.sensor_sigma, self.actuator_sigma])

    def to_dict(self) -> Dict[str, List[float]]:
        return {k: [float(x) for x in getattr(self, k)]
                for k in ("sensor_mean", "sensor_sigma", "actuator_mean", "actuator_sigma")}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[float]]) -> "NominalProfile":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


# ============================================================================
# DYNAMICS
# ============================================================================

def _clip(x: float, lo: float, hi: float) -> float:
    return lo if x < lo else hi if x > hi else x


def _effective_ti(ti: float, floor: float) -> float:
    sign = -1.0 if ti < 0 else 1.0
    return sign * max(abs(ti), floor)


def _pi_output(kc: float, ti: float, err: float, integral: float, bias: float,
               lo: float, hi: float, dt: float, floor: float) -> Tuple[float, float]:
    """PI with conditional integration; returns (clamped output, new integral)."""
    ti_eff = _effective_ti(ti, floor)
    raw = bias + kc * (err + integral / ti_eff)
    out = _clip(raw, lo, hi)
    push = kc * err / ti_eff
    if lo <= raw <= hi or (raw > hi and push < 0) or (raw < lo and push > 0):
        integral += err * dt
    return out, integral


def _physical_sensors(h1: float, h2: float, flow: float, temp: float, ode: OdeParams) -> List[float]:
    pressure = (ode.atm_pressure + ode.hydrostatic_gain * h1
                + ode.thermal_pressure_gain * (temp - ode.reference_temp))
    return [h1, h2, flow, temp, pressure]


def level_integral_at_rest(spec: PlantSpec) -> float:
    """Master-loop integral that makes the zero-error output equal the nominal feed flow."""
    ode = spec.ode
    kc = spec.nominal_configs[KC_LEVEL]
    if kc == 0:
        return 0.0
    ti = _effective_ti(spec.nominal_configs[TI_LEVEL], ode.ti_floor)
    return ti * (ode.feed_max * ode.valve_bias - ode.feed_bias) / kc


def initial_state(spec: PlantSpec) -> PlantState:
    """Plant at its nominal operating point with controllers at rest."""
    ode = spec.ode
    configs = np.asarray(spec.nominal_configs, dtype=float)
    h1, h2 = spec.initial_levels
    flow = ode.feed_max * ode.valve_bias
    sensors = np.asarray(_physical_sensors(h1, h2, flow, spec.initial_temp, ode))
    actuators = np.asarray([ode.valve_bias, configs[SP_OUTLET], configs[SP_PUMP]], dtype=float)
    return PlantState(
        tick=0,
        actuators=np.clip(actuators, 0.0, 1.0),
        sensors=sensors,
        spoofed_sensors=sensors.copy(),
        configs=configs,
        levels=np.asarray([h1, h2], dtype=float),
        temperature=float(spec.initial_temp),
        integrals=np.asarray([level_integral_at_rest(spec), 0.0]),
        sensor_bias=np.zeros(spec.n_sensors),
        actuator_bias=np.zeros(spec.n_actuators),
    )


def step(state: PlantState, spec: PlantSpec, rng: Optional[np.random.Generator] = None,
         envelope: Optional["SafetyEnvelope"] = None) -> PlantState:
    """
    Advance one tick (explicit Euler, dt = spec.dt).

    PI loops read spoofed sensors. Without an rng the plant is noise-free.
    With an envelope the interlock runs after integration and latches shutdown.
    """
    if state.shutdown:
        raise RuntimeError(f"plant is shut down at tick {state.tick}")
    ode, dt = spec.ode, spec.dt
    cfg = state.configs
    seen = state.spoofed_sensors

    # master loop: tank-1 level -> feed flow setpoint
    flow_sp, i_level = _pi_output(
        cfg[KC_LEVEL], cfg[TI_LEVEL], cfg[SP_LEVEL] - seen[0], state.integrals[0],
        ode.feed_bias, 0.0, ode.feed_max, dt, ode.ti_floor)
    # slave loop: feed flow -> feed valve
    valve_cmd, i_flow = _pi_output(
        cfg[KC_FLOW], cfg[TI_FLOW], flow_sp - seen[2], state.integrals[1],
        ode.valve_bias, 0.0, 1.0, dt, ode.ti_floor)

    if rng is not None:
        process = rng.standard_normal()
        jitter = rng.standard_normal(spec.n_actuators)
        meas = rng.standard_normal(spec.n_sensors)
    else:
        process, jitter, meas = 0.0, np.zeros(spec.n_actuators), np.zeros(spec.n_sensors)

    commands = [valve_cmd, cfg[SP_OUTLET], cfg[SP_PUMP]]
    actuators = [
        _clip(_clip(c + b, 0.0, 1.0) + spec.noise.actuator_jitter * j, 0.0, 1.0)
        for c, b, j in zip(commands, state.actuator_bias, jitter)
    ]

    h1, h2 = float(state.levels[0]), float(state.levels[1])
    temp = state.temperature
    flow = max(0.0, ode.feed_max * actuators[0] * (1.0 + spec.noise.process_fraction * process))
    q21 = ode.intertank_coeff * math.sqrt(max(h2, 0.0))
    q1 = ode.outlet_coeff * actuators[1] * math.sqrt(max(h1, 0.0))
    heat = ode.heater_power * _clip(cfg[SP_HEAT], 0.0, 1.0)
    cooling = ode.cooling_coeff * actuators[2] * (temp - ode.coolant_temp)
    thermal_mass = ode.thermal_capacity * ode.tank1_area * max(h1, ode.min_thermal_level)

    new_h2 = max(0.0, h2 + dt * (flow - q21) / ode.tank2_area)
    new_h1 = max(0.0, h1 + dt * (q21 - q1) / ode.tank1_area)
    new_temp = temp + dt * (q21 * (ode.inlet_temp - temp) + heat - cooling) / thermal_mass

    physical = _physical_sensors(new_h1, new_h2, flow, new_temp, ode)
    sensors = np.asarray([p + s * m for p, s, m in zip(physical, spec.noise.sensor, meas)])

    new = PlantState(
        tick=state.tick + 1,
        actuators=np.asarray(actuators),
        sensors=sensors,
        spoofed_sensors=sensors + state.sensor_bias,
        configs=cfg.copy(),
        shutdown=False,
        levels=np.asarray([new_h1, new_h2]),
        temperature=new_temp,
        integrals=np.asarray([i_level, i_flow]),
        sensor_bias=state.sensor_bias.copy(),
        actuator_bias=state.actuator_bias.copy(),
    )
    if envelope is not None and check_interlock(new, envelope):
        new.shutdown = True
    return new


def check_interlock(state: PlantState, env: SafetyEnvelope) -> bool:
    """True iff any true critical sensor reading lies outside [L_s, H_s]."""
    return bool(env.violations(state.sensors))


def apply_attack(state: PlantState, v: AttackVector, layout: SlotLayout) -> PlantState:
    """
    Apply persistent deltas: configs shift, sensor slots bias the controller's
    view, actuator slots bias the commanded positions.
    """
    v.check(layout)
    ds, da, dc = layout.split(v.deltas)
    new = state.copy()
    new.configs = state.configs + dc
    new.sensor_bias = state.sensor_bias + ds
    new.actuator_bias = state.actuator_bias + da
    new.spoofed_sensors = new.sensors + new.sensor_bias
    return new


def outcome_for(shutdown_tick: Optional[int], injection_tick: int) -> Outcome:
    if shutdown_tick is None:
        return Outcome.INEFFECTIVE
    if shutdown_tick > injection_tick:
        return Outcome.EFFECTIVE
    return Outcome.EXCLUDED_SHORT


def run_episode(
    spec: PlantSpec,
    env: SafetyEnvelope,
    v: AttackVector,
    injection_tick: Optional[int] = None,
    seed: int = 0,
    initial_drift: Optional[AttackVector] = None,
    episode_id: Optional[str] = None,
) -> Trace:
    """
    Run nominal until injection_tick, apply v, continue until shutdown or max_ticks.

    Rows stop at the shutdown tick. An optional initial drift is applied at tick 0.
    """
    layout = spec.layout
    injection_tick = spec.injection_tick if injection_tick is None else int(injection_tick)
    if injection_tick < spec.warmup_ticks:
        raise ValueError(f"injection_tick {injection_tick} < warmup_ticks {spec.warmup_ticks}")
    v.check(layout)
    if initial_drift is not None:
        initial_drift.check(layout)

    rng = np.random.default_rng(seed)
    state = initial_state(spec)
    if initial_drift is not None:
        state = apply_attack(state, initial_drift, layout)

    n = spec.max_ticks
    actuators = np.empty((n, spec.n_actuators))
    sensors = np.empty((n, spec.n_sensors))
    shutdown_tick: Optional[int] = None
    rows = 0
    for t in range(n):
        if t > 0:
            state = step(state, spec, rng, env)
        if t == injection_tick and not state.shutdown:
            state = apply_attack(state, v, layout)
        actuators[t] = state.actuators
        sensors[t] = state.sensors
        rows = t + 1
        if state.shutdown:
            shutdown_tick = t
            break

    outcome = outcome_for(shutdown_tick, injection_tick)
    ticks = np.arange(rows)
    labels = np.zeros(rows, dtype=np.int8)
    if outcome is Outcome.EFFECTIVE:
        labels[ticks >= injection_tick] = 1
    tripped = env.violations(sensors[rows - 1]) if shutdown_tick is not None else []
    return Trace(
        episode_id=episode_id or f"ep_{seed}",
        injection_tick=injection_tick,
        ticks=ticks,
        actuators=actuators[:rows].copy(),
        sensors=sensors[:rows].copy(),
        labels=labels,
        outcome=outcome,
        attack=AttackVector(v.deltas, source=v.source),
        seed=int(seed),
        base_configs=np.asarray(spec.nominal_configs, dtype=float),
        shutdown_tick=shutdown_tick,
        tripped=tripped,
        initial_drift=initial_drift,
    )


def warm_window(spec: PlantSpec, env: SafetyEnvelope, width: int, seed: int,
                injection_tick: Optional[int] = None,
                initial_drift: Optional[AttackVector] = None) -> np.ndarray:
    """
    Predictor-layout rows for the `width` ticks ending just before injection.

    Same seed as the episode that follows, so the window matches that episode's prefix.
    """
    injection_tick = spec.injection_tick if injection_tick is None else int(injection_tick)
    prefix_spec = replace(spec, max_ticks=injection_tick + 1)
    trace = run_episode(prefix_spec, env, AttackVector.zeros(spec.layout), injection_tick,
                        seed, initial_drift)
    feats = trace.predictor_features(spec.layout)
    end = min(injection_tick, len(trace))
    return feats[max(0, end - width):end]


def golden_trace(spec: PlantSpec, env: SafetyEnvelope, seed: int) -> Trace:
    """Nominal, unattacked episode used for sigma statistics and normalization."""
    trace = run_episode(spec, env, AttackVector.zeros(spec.layout), spec.injection_tick, seed,
                        episode_id=f"golden_{seed}")
    if trace.shutdown_tick is not None:
        logger.warning(f"[WARN] golden trace shut down at tick {trace.shutdown_tick}")
    return trace


def nominal_profile(trace: Trace, skip_ticks: int = 0) -> NominalProfile:
    """Per-variable statistics after the warmup prefix."""
    s_mean, s_sigma = nominal_stats(trace.sensors[skip_ticks:])
    a_mean, a_sigma = nominal_stats(trace.actuators[skip_ticks:])
    return NominalProfile(s_mean, s_sigma, a_mean, a_sigma)


def inject_drift(spec: PlantSpec, rng: np.random.Generator, profile: NominalProfile,
                 k: Optional[int] = None, max_targets: int = 10,
                 n_sigmas: float = 4.0) -> AttackVector:
    """
    Random in-tolerance drift on sensors/actuators; config slots stay zero.

    k targets (drawn from 1..min(max_targets, n_signals) when not given), each
    offset uniform in [-n_sigmas * sigma, +n_sigmas * sigma].
    """
    layout = spec.layout
    cap = min(max_targets, layout.signal_slots)
    if k is None:
        k = int(rng.integers(1, cap + 1)) if cap > 0 else 0
    k = min(int(k), cap)
    deltas = np.zeros(layout.size)
    if k == 0:
        return AttackVector(deltas, source="drift")
    sigma = profile.signal_sigma
    targets = rng.choice(layout.signal_slots, size=k, replace=False)
    for slot in sorted(int(t) for t in targets):
        bound = n_sigmas * sigma[slot]
        deltas[slot] = rng.uniform(-bound, bound)
    return AttackVector(deltas, source="drift")
