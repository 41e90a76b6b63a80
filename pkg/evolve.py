# evolve.py - Spear/Shield co-evolution campaigns
"""
One round: pick an attack (GA, random search or pure drift), inject it into a
fresh episode, let the Shield judge the trace, harvest what it got wrong and
retrain. Rounds repeat until the stop rule holds or max_rounds is reached.

Every random draw comes from a stream keyed by (seed, round, purpose), so the
attack sequence does not depend on the Shield's state or on the toggles.
"""

import copy
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from attack_vector import AttackVector, SlotBounds, SlotLayout
from config import set_path
from indicators import pad_curve
from nn import TrainConfig
from plant import (NominalProfile, Outcome, PlantSpec, SafetyEnvelope, Trace, golden_trace,
                   inject_drift, run_episode, warm_window)
from predictor import PredictorModel, embed
from shield import (Decision, Detector, DetectorSpec, EndToEndRule, ExemplarSet, Toggles,
                    end_to_end_decide, init_detector, judge_trace, collect_misclassified,
                    residual_baseline, select_exemplars, train_round, trace_windows,
                    window_labels)
from spear import EmbeddingArchive, SearchConfig, SpearContext, generate_attack, random_vector
from state_bus import StatusBus
from store import MetricsReport, append_jsonl, compute_metrics, metrics_table

logger = logging.getLogger(__name__)

# random stream ids
MIX_STREAM, BACKGROUND_STREAM, ATTACK_STREAM, EPISODE_STREAM, TRAIN_STREAM, INIT_STREAM = range(6)
POOL_STREAM = 11
COLLECT_STREAM = 12

ATTACK_KINDS = ("ga", "random", "drift")


def derive_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, index, stream]).generate_state(1)[0])


def stream_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


@dataclass(frozen=True)
class StopRule:
    window: int
    detect_min: int
    false_alarm_max: int
    # optional end-to-end gate on the validation pool, checked once the streak holds
    validation_detect_min: Optional[float] = None
    validation_false_alarm_max: Optional[float] = None

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("stop window must be >= 1")
        if not 0 <= self.detect_min <= self.window:
            raise ValueError(f"detect_min {self.detect_min} must be in [0, {self.window}]")
        if self.false_alarm_max < 0:
            raise ValueError("false_alarm_max must be >= 0")
        for name in ("validation_detect_min", "validation_false_alarm_max"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1] (got {value})")

    @property
    def gated(self) -> bool:
        return self.validation_detect_min is not None or self.validation_false_alarm_max is not None

    @classmethod
    def from_config(cls, section: Mapping[str, Any]) -> "StopRule":
        def rate(key: str) -> Optional[float]:
            value = section.get(key)
            return None if value is None else float(value)

        return cls(int(section["window"]), int(section["detect_min"]), int(section["false_alarm_max"]),
                   rate("validation_detect_min"), rate("validation_false_alarm_max"))


@dataclass(frozen=True)
class EvolutionConfig:
    max_rounds: int
    stop: StopRule
    toggles: Toggles
    seed: int
    attack_mix: Tuple[float, float, float] = (0.6, 0.2, 0.2)   # ga, random, drift
    background_drift_prob: float = 0.25
    drift_max_targets: int = 10
    drift_sigmas: float = 4.0
    exemplar_capacity: int = 2000

    def __post_init__(self):
        if self.max_rounds < 0:
            raise ValueError("max_rounds must be >= 0")
        if min(self.attack_mix) < 0 or sum(self.attack_mix) <= 0:
            raise ValueError("attack mix weights must be >= 0 with a positive sum")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], seed: Optional[int] = None,
                    toggles: Optional[Toggles] = None, stop_key: str = "stop",
                    max_rounds: Optional[int] = None) -> "EvolutionConfig":
        evo = cfg["evolution"]
        mix = evo["attack_mix"]
        return cls(
            max_rounds=int(evo["max_rounds"] if max_rounds is None else max_rounds),
            stop=StopRule.from_config(evo[stop_key]),
            toggles=toggles or Toggles.from_config(evo["toggles"]),
            seed=int(cfg["seed"] if seed is None else seed),
            attack_mix=tuple(float(mix.get(k, 0.0)) for k in ATTACK_KINDS),
            background_drift_prob=float(evo["background_drift_prob"]),
            drift_max_targets=int(cfg["drift"]["max_targets"]),
            drift_sigmas=float(cfg["drift"]["sigmas"]),
            exemplar_capacity=int(cfg["exemplars"]["capacity"]),
        )


@dataclass
class CampaignContext:
    """Fixed ingredients of a campaign: plant, predictor and the typed config sections."""

    spec: PlantSpec
    envelope: SafetyEnvelope
    predictor: PredictorModel
    profile: NominalProfile
    detector_spec: DetectorSpec
    rule: EndToEndRule
    train_config: TrainConfig
    search: SearchConfig
    bounds: SlotBounds

    @property
    def layout(self) -> SlotLayout:
        return self.spec.layout

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], predictor: PredictorModel,
                    profile: NominalProfile) -> "CampaignContext":
        spec = PlantSpec.from_config(cfg)
        s = cfg["spear"]
        return cls(
            spec=spec,
            envelope=SafetyEnvelope.from_config(cfg),
            predictor=predictor,
            profile=profile,
            detector_spec=DetectorSpec.from_config(cfg, spec.layout),
            rule=EndToEndRule.from_config(cfg),
            train_config=TrainConfig.from_config(cfg["detector"]["train"]),
            search=SearchConfig.from_config(cfg),
            bounds=SlotBounds.for_plant(spec.nominal_configs, profile.sensor_sigma,
                                        profile.actuator_sigma, float(s["config_bound_factor"]),
                                        float(s["signal_bound_sigmas"])),
        )


@dataclass
class RoundRecord:
    round_index: int
    attack_id: str
    source: str
    multiplicity: int
    outcome: Optional[str]
    decision: Optional[str]
    correct: Optional[bool]
    harvested: int
    error_counts: Dict[str, int]
    exemplars: int
    val_accuracy: Optional[float]
    traces_consumed: int
    trained: bool = False
    diverged: bool = False
    background_drift: bool = False
    shutdown_tick: Optional[int] = None
    error: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CampaignResult:
    detector: Detector
    records: List[RoundRecord]
    archive: EmbeddingArchive
    exemplars: ExemplarSet
    traces: List[Trace] = field(default_factory=list)
    converged: bool = False

    @property
    def errors(self) -> List[str]:
        return [r.error for r in self.records if r.error]

    @property
    def accuracy_curve(self) -> List[float]:
        return [math.nan if r.val_accuracy is None else r.val_accuracy for r in self.records]


# ============================================================================
# STOP RULE
# ============================================================================

def check_stop(records: Sequence[RoundRecord], stop: StopRule) -> bool:
    """
    Look at the last `window` attack rounds that produced a judged trace (Effective or
    Ineffective, no error). Stop iff at least detect_min of them were decided correctly
    and at most false_alarm_max were alarms on Ineffective traces.
    """
    judged = [r for r in records
              if r.error is None and r.outcome in (Outcome.EFFECTIVE.value, Outcome.INEFFECTIVE.value)]
    if len(judged) < stop.window:
        return False
    last = judged[-stop.window:]
    correct = sum(1 for r in last if r.correct)
    false_alarms = sum(1 for r in last
                       if r.outcome == Outcome.INEFFECTIVE.value and r.decision == Decision.ATTACK.value)
    return correct >= stop.detect_min and false_alarms <= stop.false_alarm_max


def passes_validation_gate(detector: Detector, traces: Sequence[Trace], rule: EndToEndRule,
                           stop: StopRule) -> bool:
    """
    End-to-end detection and false-alarm rates on the validation pool against the
    stop rule's targets. Open when the rule has no targets or the pool has no judged trace.
    """
    if not stop.gated or not _judged(traces):
        return True
    report = evaluate_detector(detector, traces, rule, "validation")
    detect_ok = (stop.validation_detect_min is None or math.isnan(report.detection_rate)
                 or report.detection_rate >= stop.validation_detect_min)
    alarm_ok = (stop.validation_false_alarm_max is None or math.isnan(report.false_alarm_rate)
                or report.false_alarm_rate <= stop.validation_false_alarm_max)
    level = logging.INFO if detect_ok and alarm_ok else logging.WARNING
    logger.log(level, f"{'[OK]' if detect_ok and alarm_ok else '[WARN]'} validation gate: "
                      f"detect={report.detection_rate:.2f} false_alarm={report.false_alarm_rate:.2f}")
    return detect_ok and alarm_ok


# ============================================================================
# ATTACK SIDE
# ============================================================================

def choose_attack_kind(mix: Sequence[float], rng: np.random.Generator) -> str:
    p = np.asarray(mix, dtype=float)
    return ATTACK_KINDS[int(rng.choice(len(ATTACK_KINDS), p=p / p.sum()))]


def inject_round(ctx: CampaignContext, evo: EvolutionConfig, round_index: int,
                 archive: EmbeddingArchive) -> Trace:
    """
    Generate this round's attack, run the episode and archive the attack's embedding.

    The warm window comes from the same seed (and background drift) as the episode,
    so the Spear scores candidates against the exact prefix they will be injected into.
    """
    spec, profile = ctx.spec, ctx.profile
    mix_rng = stream_rng(evo.seed, round_index, MIX_STREAM)
    bg_rng = stream_rng(evo.seed, round_index, BACKGROUND_STREAM)
    attack_rng = stream_rng(evo.seed, round_index, ATTACK_STREAM)
    kind = choose_attack_kind(evo.attack_mix, mix_rng)

    drift0 = None
    if bg_rng.random() < evo.background_drift_prob:
        drift0 = inject_drift(spec, bg_rng, profile, max_targets=evo.drift_max_targets,
                              n_sigmas=evo.drift_sigmas)

    episode_seed = derive_seed(evo.seed, round_index, EPISODE_STREAM)
    width = ctx.predictor.window.width
    window = warm_window(spec, ctx.envelope, width, episode_seed, initial_drift=drift0)
    warm = window.shape[0] == width

    if kind == "drift":
        v = inject_drift(spec, attack_rng, profile, max_targets=evo.drift_max_targets,
                         n_sigmas=evo.drift_sigmas)
    elif not warm:
        logger.warning(f"[SKIP] round {round_index}: plant shut down before injection, "
                       f"no warm window for the {kind} search")
        v = AttackVector.zeros(ctx.layout, source=kind)
    else:
        sctx = SpearContext(ctx.predictor, ctx.envelope, ctx.bounds, window, archive,
                            ctx.search.coverage_weight)
        v = generate_attack(sctx, replace(ctx.search, use_ga=(kind == "ga")), attack_rng).vector

    trace = run_episode(spec, ctx.envelope, v, seed=episode_seed, initial_drift=drift0,
                        episode_id=f"s{evo.seed}_r{round_index:04d}")
    if warm:
        archive.append(embed(ctx.predictor, window, v), round=round_index, source=v.source,
                       outcome=trace.outcome.value)
    return trace


# ============================================================================
# VALIDATION
# ============================================================================

@dataclass
class ValidationSet:
    windows: np.ndarray     # (n, W, F) raw
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @classmethod
    def from_traces(cls, traces: Sequence[Trace], spec: DetectorSpec) -> "ValidationSet":
        usable = [t for t in traces if t.outcome is not Outcome.EXCLUDED_SHORT and len(t) >= spec.width]
        if not usable:
            return cls(np.zeros((0, spec.width, spec.n_features)), np.zeros(0, dtype=np.int8))
        return cls(np.concatenate([trace_windows(t, spec) for t in usable]),
                   np.concatenate([window_labels(t, spec) for t in usable]))

    def accuracy(self, detector: Detector) -> Optional[float]:
        if len(self) == 0:
            return None
        preds = (detector.probabilities(self.windows) >= 0.5).astype(np.int8)
        return float(np.mean(preds == self.labels))


# ============================================================================
# CAMPAIGN
# ============================================================================

def run_evolution(
    ctx: CampaignContext,
    evo: EvolutionConfig,
    validation: Sequence[Trace] = (),
    detector: Optional[Detector] = None,
    records_path: Optional[str] = None,
    bus: Optional[StatusBus] = None,
) -> CampaignResult:
    """
    Alternate Spear and Shield until check_stop holds or max_rounds is reached.

    A round that raises is logged, recorded with its error and skipped; the
    campaign carries on with the detector it had before that round.
    """
    bus = bus or StatusBus(evo.toggles.label)
    bus.update(toggles=evo.toggles.label)
    if detector is None:
        detector = init_detector(ctx.detector_spec, ctx.profile, derive_seed(evo.seed, 0, INIT_STREAM))
    vset = ValidationSet.from_traces(validation, detector.spec)
    val_acc = vset.accuracy(detector)

    archive = EmbeddingArchive()
    exemplars = ExemplarSet(evo.exemplar_capacity)
    records: List[RoundRecord] = []
    traces: List[Trace] = []
    converged = False
    gated: Optional[Detector] = None    # last detector that failed the validation gate
    logger.info(f"Evolution start: toggles={evo.toggles.label} seed={evo.seed} "
                f"max_rounds={evo.max_rounds} validation_windows={len(vset)}")

    for r in range(evo.max_rounds):
        started = time.time()
        trace: Optional[Trace] = None
        try:
            trace = inject_round(ctx, evo, r, archive)
            record = RoundRecord(
                round_index=r, attack_id=trace.episode_id, source=trace.attack.source,
                multiplicity=trace.attack.multiplicity(), outcome=trace.outcome.value,
                decision=None, correct=None, harvested=0, error_counts={},
                exemplars=len(exemplars), val_accuracy=val_acc, traces_consumed=r + 1,
                background_drift=trace.initial_drift is not None, shutdown_tick=trace.shutdown_tick,
            )
            if trace.outcome is Outcome.EXCLUDED_SHORT:
                logger.info(f"[SKIP] round {r}: shutdown at tick {trace.shutdown_tick} "
                            f"before injection, trace excluded")
            else:
                verdicts = judge_trace(detector, trace)
                decision = end_to_end_decide(verdicts, ctx.rule, detector.spec.stride)
                correct = (decision is Decision.ATTACK) == (trace.outcome is Outcome.EFFECTIVE)
                batch = collect_misclassified(verdicts, trace, detector.spec, r)
                record.decision, record.correct = decision.value, correct
                record.harvested, record.error_counts = len(batch), dict(batch.counts)

                if len(batch) or not correct:
                    training = train_round(detector, batch.samples, exemplars.samples, ctx.train_config,
                                           evo.toggles, derive_seed(evo.seed, r, TRAIN_STREAM))
                    record.trained, record.diverged = training.trained, training.diverged
                    if training.diverged:
                        bus.add_alert(f"round {r} diverged, detector reverted", "warn", r)
                    if training.trained:
                        detector = training.detector
                        val_acc = vset.accuracy(detector)
                if evo.toggles.exe and len(batch):
                    exemplars = select_exemplars(exemplars.samples + batch.samples, detector,
                                                 evo.exemplar_capacity)
                traces.append(trace)
            record.exemplars = len(exemplars)
            record.val_accuracy = val_acc
        except Exception as e:
            logger.exception(f"[ERROR] round {r} failed")
            bus.add_alert(f"round {r}: {e}", "error", r)
            record = RoundRecord(
                round_index=r, attack_id=trace.episode_id if trace else f"s{evo.seed}_r{r:04d}",
                source=trace.attack.source if trace else "", multiplicity=0,
                outcome=trace.outcome.value if trace else None, decision=None, correct=None,
                harvested=0, error_counts={}, exemplars=len(exemplars), val_accuracy=val_acc,
                traces_consumed=r + 1, error=f"{type(e).__name__}: {e}",
            )

        records.append(record)
        if records_path:
            append_jsonl(records_path, record.to_dict())
        bus.update(rounds_done=r + 1)
        bus.update_heartbeat(round=r, outcome=record.outcome or "error", decision=record.decision or "-",
                             source=record.source, harvested=record.harvested,
                             exemplars=record.exemplars, val_acc=val_acc, traces=r + 1,
                             loop_lag_ms=int((time.time() - started) * 1000))
        logger.info(bus.heartbeat_line())

        if check_stop(records, evo.stop) and detector is not gated:
            if passes_validation_gate(detector, validation, ctx.rule, evo.stop):
                converged = True
            else:
                gated = detector
        if converged:
            bus.update(stopped=True)
            logger.info(f"[OK] stop rule met after {r + 1} traces ({evo.toggles.label}, seed {evo.seed})")
            break

    if not converged and evo.max_rounds:
        logger.warning(f"[WARN] did not converge within {evo.max_rounds} rounds "
                       f"({evo.toggles.label}, seed {evo.seed})")
    return CampaignResult(detector, records, archive, exemplars, traces, converged)


# ============================================================================
# POOLS + EVALUATION
# ============================================================================

def build_pool(ctx: CampaignContext, evo: EvolutionConfig, seed: int, n_effective: int,
               n_ineffective: int, max_attempts: int, name: str = "pool") -> List[Trace]:
    """
    Independent Effective/Ineffective traces from random-search and drift attacks.

    Random vectors are drawn while Effective traces are still needed (3 in 4 draws),
    drift vectors otherwise. Stops early with a warning after max_attempts episodes.
    """
    rng = np.random.default_rng([seed, POOL_STREAM])
    effective: List[Trace] = []
    ineffective: List[Trace] = []
    attempts = 0
    while (len(effective) < n_effective or len(ineffective) < n_ineffective) and attempts < max_attempts:
        drift0 = None
        if rng.random() < evo.background_drift_prob:
            drift0 = inject_drift(ctx.spec, rng, ctx.profile, max_targets=evo.drift_max_targets,
                                  n_sigmas=evo.drift_sigmas)
        need_effective = len(effective) < n_effective
        if need_effective and (len(ineffective) >= n_ineffective or rng.random() < 0.75):
            v = random_vector(ctx.bounds, ctx.search.max_slots, rng)
        else:
            v = inject_drift(ctx.spec, rng, ctx.profile, max_targets=evo.drift_max_targets,
                             n_sigmas=evo.drift_sigmas)
        trace = run_episode(ctx.spec, ctx.envelope, v, seed=derive_seed(seed, attempts, EPISODE_STREAM),
                            initial_drift=drift0, episode_id=f"{name}_{attempts:04d}")
        attempts += 1
        if trace.outcome is Outcome.EFFECTIVE and len(effective) < n_effective:
            effective.append(trace)
        elif trace.outcome is Outcome.INEFFECTIVE and len(ineffective) < n_ineffective:
            ineffective.append(trace)
    if len(effective) < n_effective or len(ineffective) < n_ineffective:
        logger.warning(f"[WARN] {name}: only {len(effective)}/{n_effective} Effective and "
                       f"{len(ineffective)}/{n_ineffective} Ineffective after {attempts} episodes")
    else:
        logger.info(f"[OK] {name}: {len(effective)} Effective + {len(ineffective)} Ineffective "
                    f"in {attempts} episodes")
    return effective + ineffective


def pool_from_config(ctx: CampaignContext, evo: EvolutionConfig, cfg: Mapping[str, Any],
                     kind: str) -> List[Trace]:
    """kind is 'holdout' or 'validation'; seeds are offset from the campaign seed."""
    section = cfg["evolution"][kind]
    return build_pool(ctx, evo, evo.seed + int(section["seed_offset"]), int(section["n_effective"]),
                      int(section["n_ineffective"]), int(cfg["evolution"]["pool_max_attempts"]), kind)


def nominal_traces(ctx: CampaignContext, seed: int, n: int) -> List[Trace]:
    """Unattacked episodes with fresh seeds, for calibrating the residual baseline."""
    return [golden_trace(ctx.spec, ctx.envelope, derive_seed(seed, i, POOL_STREAM)) for i in range(n)]


def _judged(traces: Iterable[Trace]) -> List[Trace]:
    return [t for t in traces if t.outcome is not Outcome.EXCLUDED_SHORT]


def _report(verdicts: List[np.ndarray], labels: List[np.ndarray], decisions: List[bool],
            outcomes: List[Outcome], split: str) -> MetricsReport:
    preds = np.concatenate(verdicts) if verdicts else np.zeros(0, dtype=int)
    truth = np.concatenate(labels) if labels else np.zeros(0, dtype=int)
    return compute_metrics(preds, truth, decisions, outcomes, split)


def evaluate_detector(detector: Detector, traces: Sequence[Trace], rule: EndToEndRule,
                      split: str = "all") -> MetricsReport:
    verdicts, labels, decisions, outcomes = [], [], [], []
    for t in _judged(traces):
        v = judge_trace(detector, t)
        verdicts.append(v)
        labels.append(window_labels(t, detector.spec))
        decisions.append(end_to_end_decide(v, rule, detector.spec.stride) is Decision.ATTACK)
        outcomes.append(t.outcome)
    return _report(verdicts, labels, decisions, outcomes, split)


def evaluate_baseline(predictor: PredictorModel, threshold: float, traces: Sequence[Trace],
                      spec: DetectorSpec, rule: EndToEndRule, layout: SlotLayout,
                      split: str = "all") -> MetricsReport:
    verdicts, labels, decisions, outcomes = [], [], [], []
    for t in _judged(traces):
        v = residual_baseline(predictor, t, threshold, spec, layout)
        verdicts.append(v)
        labels.append(window_labels(t, spec))
        decisions.append(end_to_end_decide(v, rule, spec.stride) is Decision.ATTACK)
        outcomes.append(t.outcome)
    return _report(verdicts, labels, decisions, outcomes, split)


def evaluate_campaign(ctx: CampaignContext, detector: Detector, seen: Sequence[Trace],
                      unseen: Sequence[Trace], threshold: Optional[float] = None) -> pd.DataFrame:
    """Shield (and residual baseline when a threshold is given) on seen and unseen traces."""
    rows = []
    for split, traces in (("seen", seen), ("unseen", unseen)):
        rows.append(("shield", evaluate_detector(detector, traces, ctx.rule, split)))
        if threshold is not None:
            rows.append(("residual_baseline",
                         evaluate_baseline(ctx.predictor, threshold, traces, detector.spec,
                                           ctx.rule, ctx.layout, split)))
    df = metrics_table([r for _, r in rows])
    df.insert(0, "model", [m for m, _ in rows])
    return df


# ============================================================================
# FUZZING + DATA COLLECTION
# ============================================================================

@dataclass
class FuzzResult:
    traces: List[Trace]
    archive: EmbeddingArchive
    errors: List[str] = field(default_factory=list)


def run_fuzz(ctx: CampaignContext, evo: EvolutionConfig, n_attacks: int) -> FuzzResult:
    """Spear only: inject n attacks with the campaign's mix, no Shield in the loop."""
    archive = EmbeddingArchive()
    traces: List[Trace] = []
    errors: List[str] = []
    for r in range(n_attacks):
        try:
            trace = inject_round(ctx, evo, r, archive)
        except Exception as e:
            logger.exception(f"[ERROR] fuzz attack {r} failed")
            errors.append(f"attack {r}: {type(e).__name__}: {e}")
            continue
        traces.append(trace)
        logger.info(f"fuzz {r + 1}/{n_attacks}: src={trace.attack.source} "
                    f"slots={trace.attack.multiplicity()} outcome={trace.outcome.value}")
    return FuzzResult(traces, archive, errors)


def config_perturbation(layout: SlotLayout, bounds: SlotBounds, max_slots: int,
                        rng: np.random.Generator) -> AttackVector:
    """Mid-run change of 1..max_slots configs, each uniform within its bounds."""
    k = int(rng.integers(1, min(max_slots, layout.n_configs) + 1))
    slots = layout.signal_slots + rng.choice(layout.n_configs, size=k, replace=False)
    deltas = np.zeros(layout.size)
    deltas[slots] = rng.uniform(bounds.lower[slots], bounds.upper[slots])
    return AttackVector(deltas, source="manual")


def collect_episodes(cfg: Mapping[str, Any], seed: int, n_episodes: Optional[int] = None) -> List[Trace]:
    """Nominal runs plus runs with a config perturbation at the injection tick."""
    spec = PlantSpec.from_config(cfg)
    env = SafetyEnvelope.from_config(cfg)
    col = cfg["collect"]
    n = int(col["n_episodes"] if n_episodes is None else n_episodes)
    if n < 2:
        raise ValueError(f"collect needs at least 2 episodes (got {n})")
    layout = spec.layout
    bounds = SlotBounds.for_plant(spec.nominal_configs, np.zeros(spec.n_sensors),
                                  np.zeros(spec.n_actuators),
                                  float(cfg["spear"]["config_bound_factor"]), 0.0)
    rng = np.random.default_rng([seed, COLLECT_STREAM])
    n_perturbed = int(round(float(col["perturbed_fraction"]) * n))
    perturbed = set(int(i) for i in rng.permutation(n)[:n_perturbed])

    traces = []
    for i in range(n):
        if i in perturbed:
            v = config_perturbation(layout, bounds, int(col["max_slots"]), rng)
        else:
            v = AttackVector.zeros(layout)
        trace = run_episode(spec, env, v, seed=derive_seed(seed, i, EPISODE_STREAM),
                            episode_id=f"collect_{i:03d}")
        logger.info(f"collect {i + 1}/{n}: {'perturbed' if i in perturbed else 'nominal'} "
                    f"rows={len(trace)} outcome={trace.outcome.value}")
        traces.append(trace)
    return traces


# ============================================================================
# ABLATION + SWEEP
# ============================================================================

@dataclass
class AblationJob:
    cfg: Dict[str, Any]
    predictor: PredictorModel
    profile: NominalProfile
    toggles: Toggles
    seed: int
    validation: List[Trace]
    max_rounds: int


@dataclass
class AblationRun:
    toggles: Toggles
    seed: int
    curve: List[float]
    traces_to_stop: Optional[int]
    final_accuracy: float
    converged: bool
    records: List[Dict[str, Any]]
    errors: int = 0


def _ablation_job(job: AblationJob) -> AblationRun:
    ctx = CampaignContext.from_config(job.cfg, job.predictor, job.profile)
    evo = EvolutionConfig.from_config(job.cfg, seed=job.seed, toggles=job.toggles,
                                      stop_key="ablation_stop", max_rounds=job.max_rounds)
    result = run_evolution(ctx, evo, job.validation, bus=StatusBus(f"{job.toggles.label}/s{job.seed}"))
    curve = result.accuracy_curve
    return AblationRun(
        toggles=job.toggles, seed=job.seed, curve=curve,
        traces_to_stop=len(result.records) if result.converged else None,
        final_accuracy=curve[-1] if curve else math.nan,
        converged=result.converged,
        records=[r.to_dict() for r in result.records],
        errors=len(result.errors),
    )


def run_jobs(fn: Callable[[Any], Any], jobs: Sequence[Any], workers: int) -> List[Any]:
    """Map fn over jobs, in order; a process pool when workers > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


def summarize_ablation(runs: Sequence[AblationRun], length: int) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Per toggle set: pad curves to `length` with their final value, drop the best and
    worst run by final accuracy (when there are at least 3), then mean and std.
    """
    summary_rows, curve_frames = [], []
    for toggles in Toggles.all_combinations():
        group = [r for r in runs if r.toggles == toggles]
        if not group:
            continue
        order = sorted(range(len(group)), key=lambda i: (np.nan_to_num(group[i].final_accuracy, nan=-1.0), i))
        kept = [group[i] for i in (order[1:-1] if len(group) >= 3 else order)]
        curves = np.vstack([pad_curve(r.curve, length) for r in kept]) if length > 0 else np.zeros((len(kept), 0))
        stops = [r.traces_to_stop for r in kept if r.converged]
        finals = np.asarray([r.final_accuracy for r in kept], dtype=float)
        if len(stops) == len(kept):
            status = "converged"
        elif stops:
            status = "partial"
        else:
            status = "did not converge"
        summary_rows.append({
            "config": toggles.label, **toggles.to_dict(),
            "runs": len(group), "kept": len(kept), "converged_runs": len(stops),
            "median_traces_to_stop": float(np.median(stops)) if stops else math.nan,
            "mean_traces_to_stop": float(np.mean(stops)) if stops else math.nan,
            "final_accuracy_mean": float(np.nanmean(finals)) if np.any(~np.isnan(finals)) else math.nan,
            "final_accuracy_std": float(np.nanstd(finals)) if np.any(~np.isnan(finals)) else math.nan,
            "status": status,
        })
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            curve_frames.append(pd.DataFrame({
                "config": toggles.label,
                "traces": np.arange(1, length + 1),
                "mean": np.nanmean(curves, axis=0) if len(kept) else np.full(length, math.nan),
                "std": np.nanstd(curves, axis=0) if len(kept) else np.full(length, math.nan),
            }))
    curves_df = pd.concat(curve_frames, ignore_index=True) if curve_frames else pd.DataFrame()
    return pd.DataFrame(summary_rows), curves_df


def ablation_campaign(cfg: Mapping[str, Any], predictor: PredictorModel, profile: NominalProfile,
                      validation: Sequence[Trace], seeds: Sequence[int], max_rounds: int,
                      workers: int = 1) -> Tuple[List[AblationRun], pd.DataFrame, pd.DataFrame]:
    """All 8 toggle combinations x seeds with the ablation stop rule."""
    jobs = [AblationJob(copy.deepcopy(dict(cfg)), predictor, profile, toggles, int(seed),
                        list(validation), max_rounds)
            for toggles in Toggles.all_combinations() for seed in seeds]
    logger.info(f"Ablation: {len(jobs)} campaigns on {workers} worker(s)")
    runs = run_jobs(_ablation_job, jobs, workers)
    summary, curves = summarize_ablation(runs, max_rounds)
    for _, row in summary.iterrows():
        logger.info(f"  {row['config']:<12} status={row['status']} "
                    f"median_traces={row['median_traces_to_stop']} final_acc={row['final_accuracy_mean']:.3f}")
    return runs, summary, curves


def shortest_attack_span(traces: Sequence[Trace]) -> float:
    """Fewest ticks from injection to shutdown over Effective traces (inf without any)."""
    spans = [t.shutdown_tick - t.injection_tick for t in traces
             if t.outcome is Outcome.EFFECTIVE and t.shutdown_tick is not None]
    return float(min(spans)) if spans else math.inf


def detection_extent(width: int, stride: int, rule: EndToEndRule) -> int:
    """Ticks after injection before the end-to-end rule can first call an attack."""
    # a segment holds at least one window, so segments are never shorter than the stride
    return width + rule.consecutive_required * max(rule.segment_len, stride)


def sweep_feasible(width: int, stride: int, rule: EndToEndRule, span: float) -> bool:
    return detection_extent(width, stride, rule) <= span


@dataclass
class SweepJob:
    cfg: Dict[str, Any]
    predictor: PredictorModel
    profile: NominalProfile
    width: int
    stride: int
    validation: List[Trace]
    holdout: List[Trace]


def _sweep_job(job: SweepJob) -> Dict[str, Any]:
    cfg = copy.deepcopy(job.cfg)
    set_path(cfg, "detector.width", job.width)
    set_path(cfg, "detector.stride", job.stride)
    ctx = CampaignContext.from_config(cfg, job.predictor, job.profile)
    evo = EvolutionConfig.from_config(cfg)
    result = run_evolution(ctx, evo, job.validation, bus=StatusBus(f"w{job.width}/s{job.stride}"))
    report = evaluate_detector(result.detector, job.holdout, ctx.rule, "unseen")
    return {"width": job.width, "stride": job.stride, "feasible": True,
            "converged": result.converged, "rounds": len(result.records),
            "accuracy": report.accuracy, "detection_rate": report.detection_rate,
            "false_alarm_rate": report.false_alarm_rate,
            "status": "converged" if result.converged else "did not converge"}


def parameter_sweep(cfg: Mapping[str, Any], predictor: PredictorModel, profile: NominalProfile,
                    widths: Sequence[int], strides: Sequence[int], validation: Sequence[Trace],
                    holdout: Sequence[Trace], workers: int = 1) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    One campaign + held-out evaluation per feasible (width, stride) cell.

    Returns:
        (long-form cell table, width x stride accuracy matrix); infeasible cells are NaN.
    """
    rule = EndToEndRule.from_config(cfg)
    span = shortest_attack_span(holdout)
    jobs, rows = [], []
    for width in widths:
        for stride in strides:
            if sweep_feasible(int(width), int(stride), rule, span):
                jobs.append(SweepJob(copy.deepcopy(dict(cfg)), predictor, profile, int(width),
                                     int(stride), list(validation), list(holdout)))
            else:
                logger.info(f"[SKIP] sweep cell width={width} stride={stride}: "
                            f"extent {detection_extent(int(width), int(stride), rule)} > span {span:g}")
                rows.append({"width": int(width), "stride": int(stride), "feasible": False,
                             "converged": False, "rounds": 0, "accuracy": math.nan,
                             "detection_rate": math.nan, "false_alarm_rate": math.nan,
                             "status": "infeasible"})
    rows.extend(run_jobs(_sweep_job, jobs, workers))
    cells = pd.DataFrame(rows).sort_values(["width", "stride"], kind="stable").reset_index(drop=True)
    matrix = cells.pivot(index="width", columns="stride", values="accuracy")
    return cells, matrix
