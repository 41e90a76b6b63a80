# smoke_plant.py - quick plant sanity check: golden run vs. Kc sign flip
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from attack_vector import AttackVector  # noqa: E402
from config import defaults  # noqa: E402
from plant import KC_LEVEL, PlantSpec, SafetyEnvelope, golden_trace, run_episode  # noqa: E402

if __name__ == "__main__":
    cfg = defaults()
    spec = PlantSpec.from_config(cfg)
    env = SafetyEnvelope.from_config(cfg)

    golden = golden_trace(spec, env, seed=7)
    print(f"golden: rows={len(golden)} shutdown={golden.shutdown_tick} "
          f"final={[round(float(x), 3) for x in golden.sensors[-1]]}")

    deltas = [0.0] * spec.layout.size
    deltas[spec.layout.signal_slots + KC_LEVEL] = -2.0 * spec.nominal_configs[KC_LEVEL]
    flip = run_episode(spec, env, AttackVector(deltas), seed=7)
    print(f"kc flip: outcome={flip.outcome.value} shutdown={flip.shutdown_tick} "
          f"tripped={[spec.sensor_names[i] for i in flip.tripped]}")
