# spear.py - attack generation: random search + genetic algorithm
"""
Candidates are scored by the predictor: safety proximity of the forecast
critical sensors plus coverage (distance of the candidate's embedding from the
embeddings of attacks already injected). Selection is fitness-proportional.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from attack_vector import AttackVector, SlotBounds, SlotLayout
from indicators import mean_distance_to, minmax_scale
from plant import Outcome, SafetyEnvelope, Trace, outcome_for
from predictor import PredictorModel, embed_many, predict_effects

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SearchConfig:
    population: int = 100
    use_ga: bool = True
    generations: int = 5
    offspring_count: int = 20
    max_slots: int = 10
    mutation_prob: float = 0.1
    mutation_sigma_fraction: float = 0.1
    crossover_prob: float = 0.5
    coverage_weight: float = 1.0
    elitism: bool = True

    def __post_init__(self):
        if self.population <= 0:
            raise ValueError("population must be > 0")
        if self.use_ga and self.generations <= 0:
            raise ValueError("generations must be > 0 when use_ga is on")
        if self.max_slots < 1:
            raise ValueError("max_slots must be >= 1")
        for name in ("mutation_prob", "mutation_sigma_fraction", "crossover_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any]) -> "SearchConfig":
        s = cfg["spear"]
        return cls(**{k: s[k] for k in cls.__dataclass_fields__})


@dataclass
class EmbeddingArchive:
    """Embeddings of every attack injected so far in a campaign (append-only)."""

    embeddings: List[np.ndarray] = field(default_factory=list)
    meta: List[Dict[str, Any]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.embeddings)

    def append(self, embedding: np.ndarray, **meta: Any) -> None:
        embedding = np.asarray(embedding, dtype=float).reshape(-1)
        if self.embeddings and embedding.shape != self.embeddings[0].shape:
            raise ValueError(f"embedding length {embedding.size} != archive width {self.embeddings[0].size}")
        self.embeddings.append(embedding.copy())
        self.meta.append(dict(meta))

    def as_array(self) -> np.ndarray:
        if not self.embeddings:
            return np.zeros((0, 0))
        return np.vstack(self.embeddings)


@dataclass(frozen=True)
class FitnessReport:
    coverage: float     # min-max coverage score scaled by the coverage weight
    safety: float

    @property
    def total(self) -> float:
        return self.coverage + self.safety


@dataclass
class Candidate:
    vector: AttackVector
    predicted: np.ndarray
    embedding: np.ndarray
    fitness: FitnessReport


@dataclass
class SpearContext:
    """Everything candidate scoring needs for one injection point."""

    predictor: PredictorModel
    envelope: SafetyEnvelope
    bounds: SlotBounds
    window: np.ndarray
    archive: EmbeddingArchive
    coverage_weight: float = 1.0

    def score(self, vectors: Sequence[AttackVector]) -> List[Candidate]:
        if not vectors:
            return []
        predicted = predict_effects(self.predictor, self.window, vectors)
        embeddings = embed_many(self.predictor, self.window, vectors)
        coverage = self.coverage_weight * coverage_fitness(embeddings, self.archive.as_array())
        return [
            Candidate(v, predicted[i], embeddings[i],
                      FitnessReport(float(coverage[i]), safety_fitness(predicted[i], self.envelope)))
            for i, v in enumerate(vectors)
        ]

    def rescore(self, pool: Sequence[Candidate]) -> List[Candidate]:
        """Recompute coverage relative to this pool; forecasts are reused."""
        if not pool:
            return []
        embeddings = np.vstack([c.embedding for c in pool])
        coverage = self.coverage_weight * coverage_fitness(embeddings, self.archive.as_array())
        return [Candidate(c.vector, c.predicted, c.embedding,
                          FitnessReport(float(coverage[i]), c.fitness.safety))
                for i, c in enumerate(pool)]


# ============================================================================
# FITNESS
# ============================================================================

def safety_fitness(s_p: np.ndarray, env: SafetyEnvelope) -> float:
    """
    Sum over critical sensors of how close the forecast is to (or how far past) its limits.

    Inside [L, H]: 1 - min(v - L, H - v) / (H - L), in [0.5, 1].
    Outside:       1 + min(|v - L|, |v - H|) / (H - L), > 1.
    """
    total = 0.0
    for v, lo, hi in zip(np.asarray(s_p, dtype=float), env.lower, env.upper):
        width = hi - lo
        if lo <= v <= hi:
            total += 1.0 - min(v - lo, hi - v) / width
        else:
            total += 1.0 + min(abs(v - lo), abs(v - hi)) / width
    return float(total)


def coverage_fitness(embeddings: np.ndarray, archive: np.ndarray) -> np.ndarray:
    """
    Min-max scaled mean distance of each candidate embedding to the archive.

    An empty archive or a degenerate range gives all zeros.
    """
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=float))
    archive = np.asarray(archive, dtype=float)
    if archive.size == 0:
        return np.zeros(embeddings.shape[0])
    return minmax_scale(mean_distance_to(embeddings, archive))


# ============================================================================
# SEARCH OPERATORS
# ============================================================================

def random_vector(bounds: SlotBounds, max_slots: int, rng: np.random.Generator,
                  source: str = "random") -> AttackVector:
    """Pick n ~ U{1..max_slots} distinct slots and draw each delta uniformly within its bounds."""
    size = bounds.lower.shape[0]
    n = int(rng.integers(1, min(max_slots, size) + 1))
    slots = np.sort(rng.choice(size, size=n, replace=False))
    deltas = np.zeros(size)
    deltas[slots] = rng.uniform(bounds.lower[slots], bounds.upper[slots])
    return AttackVector(deltas, source=source)


def generate_candidates(ctx: SpearContext, config: SearchConfig, rng: np.random.Generator) -> List[Candidate]:
    vectors = [random_vector(ctx.bounds, config.max_slots, rng) for _ in range(config.population)]
    return ctx.score(vectors)


def roulette_index(fitnesses: Sequence[float], rng: np.random.Generator) -> int:
    """
    Cumulative-sum draw: index i with probability f_i / sum(f).

    All-zero fitness falls back to a uniform draw.
    """
    f = np.asarray(fitnesses, dtype=float)
    if f.size == 0:
        raise ValueError("cannot select from an empty pool")
    if np.any(f < 0) or not np.all(np.isfinite(f)):
        raise ValueError("fitness values must be finite and >= 0")
    total = float(f.sum())
    if total == 0.0:
        return int(rng.integers(f.size))
    r = rng.random() * total
    acc = 0.0
    for i, value in enumerate(f):
        acc += value
        if acc > r:
            return i
    return int(np.flatnonzero(f)[-1])


def roulette_select(pool: Sequence[Candidate], rng: np.random.Generator) -> Candidate:
    return pool[roulette_index([c.fitness.total for c in pool], rng)]


def enforce_max_slots(deltas: np.ndarray, max_slots: int) -> np.ndarray:
    """Zero the smallest-|delta| slots (lowest index first on ties) beyond max_slots."""
    nz = np.flatnonzero(deltas)
    surplus = nz.size - max_slots
    if surplus <= 0:
        return deltas
    order = sorted(nz, key=lambda i: (abs(deltas[i]), i))
    out = deltas.copy()
    out[order[:surplus]] = 0.0
    return out


def breed(pool: Sequence[Candidate], config: SearchConfig, bounds: SlotBounds,
          rng: np.random.Generator) -> List[AttackVector]:
    """
    Offspring vectors: roulette-chosen parents, uniform per-slot crossover,
    per-slot Gaussian mutation, clamp, then the max-slot cap.
    """
    if len(pool) < 2:
        raise ValueError("crossover needs at least two candidates")
    fitnesses = [c.fitness.total for c in pool]
    sigma = config.mutation_sigma_fraction * bounds.range
    children = []
    for _ in range(config.offspring_count):
        p1 = pool[roulette_index(fitnesses, rng)].vector.deltas
        p2 = pool[roulette_index(fitnesses, rng)].vector.deltas
        child = np.where(rng.random(p1.size) < config.crossover_prob, p2, p1)
        mutate = rng.random(p1.size) < config.mutation_prob
        noise = rng.standard_normal(p1.size) * sigma
        child = bounds.clamp(np.where(mutate, child + noise, child))
        children.append(AttackVector(enforce_max_slots(child, config.max_slots), source="ga"))
    return children


def crossover_and_mutate(pool: Sequence[Candidate], config: SearchConfig, ctx: SpearContext,
                         rng: np.random.Generator) -> List[Candidate]:
    return ctx.score(breed(pool, config, ctx.bounds, rng))


def downselect(pool: Sequence[Candidate], size: int, config: SearchConfig,
               rng: np.random.Generator) -> List[Candidate]:
    """Roulette draws without replacement down to `size`; the best candidate survives under elitism."""
    remaining = list(pool)
    if len(remaining) <= size:
        return remaining
    chosen: List[Candidate] = []
    if config.elitism:
        best = int(np.argmax([c.fitness.total for c in remaining]))
        chosen.append(remaining.pop(best))
    while len(chosen) < size:
        chosen.append(remaining.pop(roulette_index([c.fitness.total for c in remaining], rng)))
    return chosen


def generate_attack(ctx: SpearContext, config: SearchConfig, rng: np.random.Generator) -> Candidate:
    """
    Random pool, then optionally g generations of (offspring union, rescore, downselect),
    then a final roulette pick. The caller appends the pick's embedding to the archive
    once it has been injected.
    """
    pool = generate_candidates(ctx, config, rng)
    if config.use_ga:
        for gen in range(config.generations):
            children = crossover_and_mutate(pool, config, ctx, rng)
            pool = downselect(ctx.rescore(pool + children), config.population, config, rng)
            logger.debug(f"GA generation {gen + 1}: best fitness "
                         f"{max(c.fitness.total for c in pool):.4f}")
    pick = roulette_select(pool, rng)
    pick.vector.source = "ga" if config.use_ga else "random"
    return pick


def classify_outcome(trace: Trace) -> Outcome:
    return outcome_for(trace.shutdown_tick, trace.injection_tick)
