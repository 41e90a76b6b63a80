# conftest.py - shared fixtures: a short plant, its golden trace and an untrained predictor
import numpy as np
import pytest

from attack_vector import AttackVector
from config import load_config
from evolve import CampaignContext
from nn import Activation, init_model
from plant import Outcome, PlantSpec, SafetyEnvelope, Trace, golden_trace, nominal_profile
from predictor import Normalizer, PredictorModel, WindowSpec

# quick plant: small tanks, so episodes trip within a few hundred ticks
FAST = {
    "plant.ode.tank1_area": 4.0,
    "plant.ode.tank2_area": 4.0,
    "plant.nominal_configs": [0.1, 160.0, 2.0, 2.0, 1.0, 0.5, 0.5, 0.5],
    "plant.max_ticks": 1200,
    "plant.warmup_ticks": 200,
    "plant.injection_tick": 400,
    "predictor.width": 8,
    "predictor.horizon": 4,
    "predictor.hidden": [16, 8],
    "predictor.train.max_epochs": 2,
    "predictor.train.batch_size": 32,
    "collect.n_episodes": 4,
    "detector.width": 20,
    "detector.stride": 5,
    "detector.hidden": [16, 8],
    "detector.train.max_epochs": 2,
    "end_to_end.segment_len": 10,
    "end_to_end.consecutive_required": 3,
    "exemplars.capacity": 40,
    "spear.population": 12,
    "spear.generations": 2,
    "spear.offspring_count": 6,
    "spear.max_slots": 4,
    "evolution.max_rounds": 3,
    "evolution.holdout.n_effective": 1,
    "evolution.holdout.n_ineffective": 1,
    "evolution.validation.n_effective": 1,
    "evolution.validation.n_ineffective": 1,
    "evolution.pool_max_attempts": 4,
    "evolution.ablation_seeds": 1,
    "evolution.ablation_max_rounds": 2,
    "sweep.widths": [20],
    "sweep.strides": [5],
}


def fast_config(**extra):
    overrides = dict(FAST)
    overrides.update(extra)
    return load_config(env={}, overrides=overrides)


@pytest.fixture(scope="session")
def fast_cfg():
    return fast_config()


@pytest.fixture(scope="session")
def fast_spec(fast_cfg):
    return PlantSpec.from_config(fast_cfg)


@pytest.fixture(scope="session")
def envelope(fast_cfg):
    return SafetyEnvelope.from_config(fast_cfg)


@pytest.fixture(scope="session")
def golden(fast_spec, envelope):
    return golden_trace(fast_spec, envelope, seed=7)


@pytest.fixture(scope="session")
def profile(golden, fast_spec):
    return nominal_profile(golden, fast_spec.warmup_ticks)


@pytest.fixture(scope="session")
def tiny_predictor(fast_cfg, fast_spec, golden):
    """Untrained, but with real normalization stats, so forecasts and embeddings are finite."""
    layout = fast_spec.layout
    window = WindowSpec.from_config(fast_cfg, layout)
    feats = golden.predictor_features(layout)
    model = init_model([window.input_size, 16, 8, window.n_targets],
                       output_activation=Activation.IDENTITY, seed=3)
    return PredictorModel(model, window, Normalizer.fit(feats), Normalizer.fit(golden.sensors))


@pytest.fixture
def ctx(fast_cfg, tiny_predictor, profile):
    return CampaignContext.from_config(fast_cfg, tiny_predictor, profile)


@pytest.fixture
def make_trace():
    """Hand-built traces with random readings and the given per-tick labels."""
    def _make(labels, injection_tick, outcome=Outcome.EFFECTIVE, seed=0, shutdown_tick=None,
              source="manual"):
        labels = np.asarray(labels, dtype=np.int8)
        n = labels.size
        rng = np.random.default_rng(seed)
        return Trace(
            episode_id=f"t{seed}",
            injection_tick=injection_tick,
            ticks=np.arange(n),
            actuators=rng.random((n, 3)),
            sensors=rng.random((n, 5)),
            labels=labels,
            outcome=outcome,
            attack=AttackVector(np.zeros(16), source=source),
            seed=seed,
            base_configs=np.zeros(8),
            shutdown_tick=shutdown_tick,
        )
    return _make
