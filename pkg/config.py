# config.py - EvoDefense campaign configuration
"""
Defaults for the plant, the Spear (attack search), the Shield (detector) and the
evolution campaign.

Every value below can be overridden, in increasing precedence, by:
1. a YAML config file (see config.yaml),
2. environment variables EVODEF_<SECTION>__<KEY> (e.g. EVODEF_PLANT__DT=0.25),
3. command-line flags.

The effective config is dumped into every campaign manifest.
"""

import copy
import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Mapping, Optional

import yaml

logger = logging.getLogger(__name__)

# ============================================================================
# LOGGING
# ============================================================================

LOG_LEVEL = os.getenv("EVODEF_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
LOG_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_FILE = "evodef.log"

# ============================================================================
# CORE SETTINGS
# ============================================================================

SEED = int(os.getenv("EVODEF_SEED", "7"))
JOBS = int(os.getenv("EVODEF_JOBS", "1"))
OUT_DIR = os.getenv("EVODEF_OUT", "runs")

ENV_PREFIX = "EVODEF_"
FORMAT_VERSION = 1

# ============================================================================
# PLANT (two-tank cascade, level + flow PI loops, heated tank 1)
# ============================================================================

DT = 0.5                    # seconds per tick
WARMUP_TICKS = 500
MAX_TICKS = 4000
INJECTION_TICK = 1000       # attacks land after the plant has settled

SENSOR_NAMES = ["level_1", "level_2", "feed_flow", "temperature", "pressure"]
ACTUATOR_NAMES = ["feed_valve", "outlet_valve", "cooling_pump"]
CONFIG_NAMES = [
    "kc_level", "ti_level",     # master loop (tank 1 level -> feed flow setpoint)
    "kc_flow", "ti_flow",       # slave loop (feed flow -> feed valve)
    "sp_level", "sp_outlet",    # level setpoint, outlet valve position
    "sp_pump", "sp_heat",       # cooling pump speed, heater duty
]
NOMINAL_CONFIGS = [0.1, 1600.0, 2.0, 2.0, 1.0, 0.5, 0.5, 0.5]

# Physical constants
TANK1_AREA = 40.0           # m^2, large enough that any attack needs hundreds of ticks to trip
TANK2_AREA = 40.0           # m^2
OUTLET_COEFF = 0.2          # q1 = c1 * outlet_valve * sqrt(h1)
INTERTANK_COEFF = 0.1       # q21 = c21 * sqrt(h2)
FEED_MAX = 0.2              # m^3/s at fully open feed valve
FEED_BIAS = 0.2             # master loop output bias; the level integral holds the offset to nominal flow
VALVE_BIAS = 0.5            # slave loop output bias (nominal valve opening)
TI_FLOOR = 0.5              # smallest |Ti| the PI loops will divide by
INLET_TEMP = 20.0           # degC
COOLANT_TEMP = 10.0         # degC
HEATER_POWER = 10.0
COOLING_COEFF = 0.2
THERMAL_CAPACITY = 10.0
MIN_THERMAL_LEVEL = 0.05    # m, keeps the heat balance finite near empty
ATM_PRESSURE = 101.3        # kPa
HYDROSTATIC_GAIN = 9.81     # kPa per m of level
THERMAL_PRESSURE_GAIN = 0.5  # kPa per degC above reference
REFERENCE_TEMP = 40.0

INITIAL_LEVELS = [1.0, 1.0]
INITIAL_TEMP = 40.0

# Noise (all draws come from the episode's seeded generator)
SENSOR_NOISE = [0.003, 0.003, 0.0005, 0.05, 0.05]
PROCESS_NOISE_FRACTION = 0.01   # multiplicative noise on feed flow
ACTUATOR_JITTER = 0.002

# ============================================================================
# SAFETY ENVELOPE (closed interval is safe)
# ============================================================================

ENVELOPE_LOWER = [0.3, 0.2, -0.05, 25.0, 100.0]
ENVELOPE_UPPER = [2.2, 2.5, 0.25, 60.0, 130.0]

# ============================================================================
# PREDICTOR
# ============================================================================

PREDICTOR_WIDTH = 32
PREDICTOR_HORIZON = 20
PREDICTOR_HIDDEN = [64, 32]     # last entry is the embedding width
PREDICTOR_DATASET_STRIDE = 4
PREDICTOR_LR = 0.01
PREDICTOR_BATCH = 64
PREDICTOR_MAX_EPOCHS = 30
PREDICTOR_PATIENCE = 5

COLLECT_EPISODES = 30
COLLECT_PERTURBED_FRACTION = 0.5
COLLECT_MAX_SLOTS = 3

# ============================================================================
# DETECTOR (Shield)
# ============================================================================

DETECTOR_WIDTH = 50
DETECTOR_STRIDE = 5
DETECTOR_HIDDEN = [64, 32]
FEATURE_CLIP = 20.0
DETECTOR_LR = 0.01
DETECTOR_BATCH = 64
DETECTOR_MAX_EPOCHS = 20
DETECTOR_PATIENCE = 5
DETECTOR_HOLDOUT_FRACTION = 0.1
BALANCE_LAMBDA = 1.0
UTILITY_DECAY = 0.99
REPLACEMENT_RATE = 1e-3

SEGMENT_LEN = 25
CONSECUTIVE_REQUIRED = 8
EXEMPLAR_CAPACITY = 2000

BASELINE_QUANTILE = 99.5

# ============================================================================
# SPEAR (attack search)
# ============================================================================

POPULATION = 100
USE_GA = True
GENERATIONS = 5
OFFSPRING_COUNT = 20
MAX_SLOTS = 10
MUTATION_PROB = 0.1
MUTATION_SIGMA_FRACTION = 0.1
CROSSOVER_PROB = 0.5
COVERAGE_WEIGHT = 1.0       # 0 disables coverage guidance
ELITISM = True
CONFIG_BOUND_FACTOR = 2.0   # config deltas within +/- factor * |nominal|
SIGNAL_BOUND_SIGMAS = 8.0   # sensor/actuator biases within +/- k * sigma

DRIFT_MAX_TARGETS = 10
DRIFT_SIGMAS = 4.0

# ============================================================================
# EVOLUTION
# ============================================================================

MAX_ROUNDS = 300
ATTACK_MIX = {"ga": 0.6, "random": 0.2, "drift": 0.2}
BACKGROUND_DRIFT_PROB = 0.25
TOGGLES = {"cbl": True, "exe": True, "cbp": True}

STOP_WINDOW = 10
STOP_DETECT_MIN = 9
STOP_FALSE_ALARM_MAX = 1
# the streak must also hold up end to end on the validation pool
STOP_VALIDATION_DETECT_MIN = 0.9
STOP_VALIDATION_FALSE_ALARM_MAX = 0.1

# Looser stop used by ablation runs
ABLATION_STOP_WINDOW = 5
ABLATION_STOP_DETECT_MIN = 4
ABLATION_STOP_FALSE_ALARM_MAX = 1
ABLATION_SEEDS = 5
ABLATION_MAX_ROUNDS = 120

HOLDOUT_EFFECTIVE = 40
HOLDOUT_INEFFECTIVE = 40
HOLDOUT_SEED_OFFSET = 1_000_003
VALIDATION_EFFECTIVE = 20
VALIDATION_INEFFECTIVE = 20
VALIDATION_SEED_OFFSET = 2_000_003
POOL_MAX_ATTEMPTS = 2000

SWEEP_WIDTHS = [25, 50, 75, 100]
SWEEP_STRIDES = [1, 5, 10, 25]

# ============================================================================
# STORE
# ============================================================================

MANIFEST_FILE = "manifest.json"
ROUNDS_FILE = "rounds.jsonl"
NOMINAL_CALIBRATION_EPISODES = 5


def defaults() -> Dict[str, Any]:
    """Assemble the module constants into the nested config dict."""
    return {
        "format_version": FORMAT_VERSION,
        "seed": SEED,
        "plant": {
            "dt": DT,
            "warmup_ticks": WARMUP_TICKS,
            "max_ticks": MAX_TICKS,
            "injection_tick": INJECTION_TICK,
            "sensor_names": list(SENSOR_NAMES),
            "actuator_names": list(ACTUATOR_NAMES),
            "config_names": list(CONFIG_NAMES),
            "nominal_configs": list(NOMINAL_CONFIGS),
            "initial_levels": list(INITIAL_LEVELS),
            "initial_temp": INITIAL_TEMP,
            "ode": {
                "tank1_area": TANK1_AREA,
                "tank2_area": TANK2_AREA,
                "outlet_coeff": OUTLET_COEFF,
                "intertank_coeff": INTERTANK_COEFF,
                "feed_max": FEED_MAX,
                "feed_bias": FEED_BIAS,
                "valve_bias": VALVE_BIAS,
                "ti_floor": TI_FLOOR,
                "inlet_temp": INLET_TEMP,
                "coolant_temp": COOLANT_TEMP,
                "heater_power": HEATER_POWER,
                "cooling_coeff": COOLING_COEFF,
                "thermal_capacity": THERMAL_CAPACITY,
                "min_thermal_level": MIN_THERMAL_LEVEL,
                "atm_pressure": ATM_PRESSURE,
                "hydrostatic_gain": HYDROSTATIC_GAIN,
                "thermal_pressure_gain": THERMAL_PRESSURE_GAIN,
                "reference_temp": REFERENCE_TEMP,
            },
            "noise": {
                "sensor": list(SENSOR_NOISE),
                "process_fraction": PROCESS_NOISE_FRACTION,
                "actuator_jitter": ACTUATOR_JITTER,
            },
        },
        "envelope": {"lower": list(ENVELOPE_LOWER), "upper": list(ENVELOPE_UPPER)},
        "predictor": {
            "width": PREDICTOR_WIDTH,
            "horizon": PREDICTOR_HORIZON,
            "hidden": list(PREDICTOR_HIDDEN),
            "dataset_stride": PREDICTOR_DATASET_STRIDE,
            "train": {
                "learning_rate": PREDICTOR_LR,
                "batch_size": PREDICTOR_BATCH,
                "max_epochs": PREDICTOR_MAX_EPOCHS,
                "patience": PREDICTOR_PATIENCE,
            },
        },
        "collect": {
            "n_episodes": COLLECT_EPISODES,
            "perturbed_fraction": COLLECT_PERTURBED_FRACTION,
            "max_slots": COLLECT_MAX_SLOTS,
        },
        "detector": {
            "width": DETECTOR_WIDTH,
            "stride": DETECTOR_STRIDE,
            "hidden": list(DETECTOR_HIDDEN),
            "feature_clip": FEATURE_CLIP,
            "holdout_fraction": DETECTOR_HOLDOUT_FRACTION,
            "train": {
                "learning_rate": DETECTOR_LR,
                "batch_size": DETECTOR_BATCH,
                "max_epochs": DETECTOR_MAX_EPOCHS,
                "patience": DETECTOR_PATIENCE,
                "balance_lambda": BALANCE_LAMBDA,
                "utility_decay": UTILITY_DECAY,
                "replacement_rate": REPLACEMENT_RATE,
            },
        },
        "end_to_end": {
            "segment_len": SEGMENT_LEN,
            "consecutive_required": CONSECUTIVE_REQUIRED,
        },
        "exemplars": {"capacity": EXEMPLAR_CAPACITY},
        "baseline": {"quantile": BASELINE_QUANTILE},
        "spear": {
            "population": POPULATION,
            "use_ga": USE_GA,
            "generations": GENERATIONS,
            "offspring_count": OFFSPRING_COUNT,
            "max_slots": MAX_SLOTS,
            "mutation_prob": MUTATION_PROB,
            "mutation_sigma_fraction": MUTATION_SIGMA_FRACTION,
            "crossover_prob": CROSSOVER_PROB,
            "coverage_weight": COVERAGE_WEIGHT,
            "elitism": ELITISM,
            "config_bound_factor": CONFIG_BOUND_FACTOR,
            "signal_bound_sigmas": SIGNAL_BOUND_SIGMAS,
        },
        "drift": {"max_targets": DRIFT_MAX_TARGETS, "sigmas": DRIFT_SIGMAS},
        "evolution": {
            "max_rounds": MAX_ROUNDS,
            "attack_mix": dict(ATTACK_MIX),
            "background_drift_prob": BACKGROUND_DRIFT_PROB,
            "toggles": dict(TOGGLES),
            "stop": {
                "window": STOP_WINDOW,
                "detect_min": STOP_DETECT_MIN,
                "false_alarm_max": STOP_FALSE_ALARM_MAX,
                "validation_detect_min": STOP_VALIDATION_DETECT_MIN,
                "validation_false_alarm_max": STOP_VALIDATION_FALSE_ALARM_MAX,
            },
            "ablation_stop": {
                "window": ABLATION_STOP_WINDOW,
                "detect_min": ABLATION_STOP_DETECT_MIN,
                "false_alarm_max": ABLATION_STOP_FALSE_ALARM_MAX,
            },
            "ablation_seeds": ABLATION_SEEDS,
            "ablation_max_rounds": ABLATION_MAX_ROUNDS,
            "holdout": {
                "n_effective": HOLDOUT_EFFECTIVE,
                "n_ineffective": HOLDOUT_INEFFECTIVE,
                "seed_offset": HOLDOUT_SEED_OFFSET,
            },
            "validation": {
                "n_effective": VALIDATION_EFFECTIVE,
                "n_ineffective": VALIDATION_INEFFECTIVE,
                "seed_offset": VALIDATION_SEED_OFFSET,
            },
            "pool_max_attempts": POOL_MAX_ATTEMPTS,
        },
        "sweep": {"widths": list(SWEEP_WIDTHS), "strides": list(SWEEP_STRIDES)},
    }


class ConfigError(ValueError):
    """Raised with the full list of validation failures."""

    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid config: " + "; ".join(self.errors))


# ============================================================================
# LOADING
# ============================================================================

def deep_merge(base: Dict[str, Any], overlay: Mapping[str, Any]) -> Dict[str, Any]:
    """Return a copy of base with overlay merged in (dicts recurse, the rest replaces)."""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_path(cfg: Dict[str, Any], dotted: str, value: Any) -> None:
    """Set cfg['a']['b'] for dotted path 'a.b', creating sections as needed."""
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def has_path(cfg: Mapping[str, Any], dotted: str) -> bool:
    node: Any = cfg
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return False
        node = node[part]
    return True


def env_overrides(env: Mapping[str, str]) -> Dict[str, Any]:
    """
    Collect EVODEF_<SECTION>__<KEY> variables into dotted overrides.

    Values are parsed as YAML scalars so "0.25", "true" and "[1, 2]" keep their types.
    Process-level knobs (EVODEF_LOG_LEVEL, EVODEF_JOBS, EVODEF_OUT) are not config keys.
    EVODEF_SEED maps to the top-level seed.
    """
    overrides: Dict[str, Any] = {}
    for key, raw in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        if rest == "seed":
            overrides["seed"] = yaml.safe_load(raw)
        elif "__" in rest:
            overrides[rest.replace("__", ".")] = yaml.safe_load(raw)
    return overrides


def validate_config(cfg: Mapping[str, Any]) -> List[str]:
    """Return every violation found; an empty list means the config is usable."""
    errors: List[str] = []

    def check(cond: bool, field: str, msg: str) -> None:
        if not cond:
            errors.append(f"{field}: {msg}")

    try:
        plant = cfg["plant"]
        n_s = len(plant["sensor_names"])
        n_a = len(plant["actuator_names"])
        n_c = len(plant["config_names"])
        check(plant["dt"] > 0, "plant.dt", f"must be > 0 (got {plant['dt']})")
        check(plant["max_ticks"] > plant["warmup_ticks"], "plant.max_ticks",
              "must exceed plant.warmup_ticks")
        check(plant["warmup_ticks"] >= 0, "plant.warmup_ticks", "must be >= 0")
        check(plant["warmup_ticks"] <= plant["injection_tick"] < plant["max_ticks"],
              "plant.injection_tick", "must lie in [warmup_ticks, max_ticks)")
        check(n_s >= 2, "plant.sensor_names", "need at least 2 critical sensors")
        check(n_s == 5 and n_a == 3 and n_c == 8, "plant",
              "the built-in plant has 5 sensors, 3 actuators and 8 configs")
        check(len(plant["nominal_configs"]) == n_c, "plant.nominal_configs",
              f"expected {n_c} values")
        check(len(plant["noise"]["sensor"]) == n_s, "plant.noise.sensor",
              f"expected {n_s} values")
        for name, value in plant["ode"].items():
            if name in ("tank1_area", "tank2_area", "thermal_capacity", "min_thermal_level", "ti_floor"):
                check(value > 0, f"plant.ode.{name}", "must be > 0")
            elif name not in ("atm_pressure", "reference_temp", "inlet_temp", "coolant_temp"):
                check(value >= 0, f"plant.ode.{name}", "must be >= 0")

        lower, upper = cfg["envelope"]["lower"], cfg["envelope"]["upper"]
        check(len(lower) == n_s and len(upper) == n_s, "envelope",
              f"lower/upper need {n_s} entries")
        for i, (lo, hi) in enumerate(zip(lower, upper)):
            check(hi > lo, f"envelope[{i}]", f"upper {hi} must exceed lower {lo}")

        pred = cfg["predictor"]
        check(pred["width"] >= 1, "predictor.width", "must be >= 1")
        check(pred["horizon"] >= 1, "predictor.horizon", "must be >= 1")
        check(pred["dataset_stride"] >= 1, "predictor.dataset_stride", "must be >= 1")
        check(len(pred["hidden"]) >= 1, "predictor.hidden", "need at least one hidden layer")
        check(cfg["collect"]["n_episodes"] >= 2, "collect.n_episodes", "must be >= 2")

        det = cfg["detector"]
        check(det["width"] >= 1, "detector.width", "must be >= 1")
        check(det["stride"] >= 1, "detector.stride", "must be >= 1")
        check(len(det["hidden"]) >= 1, "detector.hidden", "need at least one hidden layer")
        check(0.0 < det["holdout_fraction"] < 1.0, "detector.holdout_fraction", "must be in (0, 1)")
        for section in ("predictor", "detector"):
            train = cfg[section]["train"]
            check(train["learning_rate"] > 0, f"{section}.train.learning_rate", "must be > 0")
            check(train["batch_size"] >= 1, f"{section}.train.batch_size", "must be >= 1")
            check(train["max_epochs"] >= 1, f"{section}.train.max_epochs", "must be >= 1")
            check(train["patience"] >= 1, f"{section}.train.patience", "must be >= 1")
        dtrain = det["train"]
        check(dtrain["balance_lambda"] >= 0, "detector.train.balance_lambda", "must be >= 0")
        check(0 < dtrain["utility_decay"] < 1, "detector.train.utility_decay", "must be in (0, 1)")
        check(0 < dtrain["replacement_rate"] < 1, "detector.train.replacement_rate", "must be in (0, 1)")

        e2e = cfg["end_to_end"]
        check(e2e["segment_len"] >= 1, "end_to_end.segment_len", "must be >= 1")
        check(e2e["consecutive_required"] >= 1, "end_to_end.consecutive_required", "must be >= 1")
        check(cfg["exemplars"]["capacity"] >= 1, "exemplars.capacity", "must be >= 1")
        check(0 < cfg["baseline"]["quantile"] <= 100, "baseline.quantile", "must be in (0, 100]")

        spear = cfg["spear"]
        check(spear["population"] > 0, "spear.population", "must be > 0")
        check(not spear["use_ga"] or spear["generations"] > 0, "spear.generations",
              "must be > 0 when use_ga is on")
        check(spear["offspring_count"] >= 0, "spear.offspring_count", "must be >= 0")
        check(1 <= spear["max_slots"] <= n_s + n_a + n_c, "spear.max_slots",
              "must be between 1 and the attack vector length")
        for name in ("mutation_prob", "mutation_sigma_fraction", "crossover_prob"):
            check(0.0 <= spear[name] <= 1.0, f"spear.{name}", "must be in [0, 1]")
        check(spear["coverage_weight"] >= 0, "spear.coverage_weight", "must be >= 0")

        check(cfg["drift"]["max_targets"] >= 0, "drift.max_targets", "must be >= 0")
        check(cfg["drift"]["sigmas"] >= 0, "drift.sigmas", "must be >= 0")

        evo = cfg["evolution"]
        check(evo["max_rounds"] >= 0, "evolution.max_rounds", "must be >= 0")
        mix = evo["attack_mix"]
        check(all(v >= 0 for v in mix.values()) and sum(mix.values()) > 0,
              "evolution.attack_mix", "weights must be >= 0 with a positive sum")
        check(set(mix) <= {"ga", "random", "drift"}, "evolution.attack_mix",
              "keys must be ga, random, drift")
        check(0.0 <= evo["background_drift_prob"] <= 1.0, "evolution.background_drift_prob",
              "must be in [0, 1]")
        check(set(evo["toggles"]) == {"cbl", "exe", "cbp"}, "evolution.toggles",
              "must name cbl, exe, cbp")
        for stop_name in ("stop", "ablation_stop"):
            stop = evo[stop_name]
            check(stop["window"] >= 1, f"evolution.{stop_name}.window", "must be >= 1")
            check(0 <= stop["detect_min"] <= stop["window"], f"evolution.{stop_name}.detect_min",
                  "must be in [0, window]")
            check(stop["false_alarm_max"] >= 0, f"evolution.{stop_name}.false_alarm_max", "must be >= 0")
            for key in ("validation_detect_min", "validation_false_alarm_max"):
                value = stop.get(key)
                check(value is None or 0.0 <= value <= 1.0, f"evolution.{stop_name}.{key}",
                      "must be in [0, 1] when set")
        check(evo["ablation_seeds"] >= 1, "evolution.ablation_seeds", "must be >= 1")
        for pool in ("holdout", "validation"):
            check(evo[pool]["n_effective"] >= 0 and evo[pool]["n_ineffective"] >= 0,
                  f"evolution.{pool}", "counts must be >= 0")
    except (KeyError, TypeError) as e:
        errors.append(f"malformed config: missing or mistyped field {e}")
    return errors


def load_config(
    path: Optional[str] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Build the effective config: defaults < YAML file < environment < overrides.

    Args:
        path: optional YAML file with nested sections
        env: environment mapping (defaults to os.environ)
        overrides: dotted-path values from CLI flags, e.g. {"evolution.max_rounds": 50}

    Returns:
        The merged, validated config dict.

    Raises:
        ConfigError listing every invalid or unknown field.
    """
    cfg = defaults()
    errors: List[str] = []

    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                file_cfg = yaml.safe_load(f) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError([f"{path}: cannot read config file ({e})"]) from e
        if not isinstance(file_cfg, Mapping):
            raise ConfigError([f"{path}: top level must be a mapping"])
        cfg = deep_merge(cfg, file_cfg)
        logger.info(f"[OK] Loaded config file {path}")

    layered = dict(env_overrides(os.environ if env is None else env))
    layered.update(overrides or {})
    for dotted, value in layered.items():
        if not has_path(cfg, dotted):
            errors.append(f"{dotted}: unknown config key")
            continue
        set_path(cfg, dotted, value)

    errors.extend(validate_config(cfg))
    if errors:
        for err in errors:
            logger.error(f"[ERROR] config {err}")
        raise ConfigError(errors)
    return cfg


def config_digest(cfg: Mapping[str, Any]) -> str:
    """sha256 over the canonical JSON form of the config."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def campaign_dirname(cfg: Mapping[str, Any], seed: int) -> str:
    return f"{config_digest(cfg)[:12]}_s{seed}"
