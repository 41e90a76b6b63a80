#!/usr/bin/env python3
# main.py - EvoDefense command line
"""
Subcommands: simulate | collect | train-predictor | fuzz | evolve | eval | ablate | sweep

Each run writes into <out>/<config digest>_s<seed>/<command>/: the manifest first,
then the results, then the manifest again with file digests. Exit status is 1 iff
an error was recorded.
"""

import argparse
import logging
import math
import os
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from config import (JOBS, LOG_DATE_FORMAT, LOG_FILE, LOG_FORMAT, LOG_LEVEL, MANIFEST_FILE,
                    NOMINAL_CALIBRATION_EPISODES, OUT_DIR, ROUNDS_FILE, ConfigError,
                    campaign_dirname, load_config)
from evolve import (CampaignContext, EvolutionConfig, ablation_campaign, collect_episodes,
                    evaluate_campaign, nominal_traces, parameter_sweep, pool_from_config,
                    run_evolution, run_fuzz)
from indicators import mean_pairwise_distance
from nn import TrainConfig, TrainingDivergedError
from plant import NominalProfile, PlantSpec, SafetyEnvelope, Trace, golden_trace, nominal_profile
from predictor import (PredictorModel, WindowSpec, build_dataset, load_predictor, save_predictor,
                       split_episodes, train_predictor)
from shield import Toggles, calibrate_threshold, init_detector, load_detector, save_detector
from state_bus import StatusBus
from store import (CampaignManifest, append_jsonl, discovery_report, read_json, read_trace,
                   write_archive, write_json, write_samples, write_table, write_trace)

logger = logging.getLogger(__name__)

COMMANDS = ("simulate", "collect", "train-predictor", "fuzz", "evolve", "eval", "ablate", "sweep")


def setup_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        datefmt=LOG_DATE_FORMAT,
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


def attach_file_log(out_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(out_dir, LOG_FILE))
    handler.setFormatter(logging.Formatter(LOG_FORMAT, LOG_DATE_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def parse_grid(text: str) -> Tuple[List[int], List[int]]:
    """'25,50:1,5' -> widths [25, 50], strides [1, 5]."""
    try:
        widths, strides = text.split(":")
        w = [int(x) for x in widths.split(",") if x.strip()]
        s = [int(x) for x in strides.split(",") if x.strip()]
    except ValueError as e:
        raise ValueError(f"--grid must look like '25,50:1,5' (got {text!r})") from e
    if not w or not s:
        raise ValueError(f"--grid needs at least one width and one stride (got {text!r})")
    return w, s


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evodef", description="CPS attacker/defender co-evolution")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="campaign seed (overrides config)")
    parser.add_argument("--out", default=OUT_DIR, help="output root directory")
    parser.add_argument("--jobs", type=int, default=JOBS, help="worker processes for ablate/sweep")
    parser.add_argument("--rounds", type=int, help="round cap (evolve/fuzz/sweep) or ablation round cap")
    parser.add_argument("--toggles", help="shield modules, e.g. 'cbl,exe,cbp' or 'none'")
    parser.add_argument("--grid", help="sweep grid 'W1,W2:S1,S2'")
    parser.add_argument("--episodes", type=int, help="collect episode count")
    parser.add_argument("--data", help="collect output directory (train-predictor)")
    parser.add_argument("--predictor", help="predictor checkpoint")
    parser.add_argument("--detector", help="detector checkpoint (eval)")
    parser.add_argument("--campaign", help="evolve output directory whose traces count as seen (eval)")
    parser.add_argument("--log-level", default=LOG_LEVEL)
    return parser


def overrides_from_args(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags as dotted config overrides (highest precedence)."""
    overrides: Dict[str, Any] = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.episodes is not None:
        overrides["collect.n_episodes"] = args.episodes
    if args.rounds is not None:
        key = "evolution.ablation_max_rounds" if args.command == "ablate" else "evolution.max_rounds"
        overrides[key] = args.rounds
    if args.toggles is not None:
        overrides["evolution.toggles"] = Toggles.parse(args.toggles).to_dict()
    if args.grid is not None:
        widths, strides = parse_grid(args.grid)
        overrides["sweep.widths"] = widths
        overrides["sweep.strides"] = strides
    return overrides


class Run:
    """Output directory, manifest and error list of one command invocation."""

    def __init__(self, command: str, cfg: Dict[str, Any], out_root: str, jobs: int):
        self.command = command
        self.cfg = cfg
        self.seed = int(cfg["seed"])
        self.jobs = max(1, int(jobs))
        self.dir = os.path.join(out_root, campaign_dirname(cfg, self.seed), command)
        os.makedirs(self.dir, exist_ok=True)
        self.manifest = CampaignManifest(command=command, seed=self.seed, config=cfg)
        self.errors: List[str] = []

    def path(self, *parts: str) -> str:
        full = os.path.join(self.dir, *parts)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def fresh(self, *parts: str) -> str:
        """Path of a result file that must start empty (append-only logs)."""
        full = self.path(*parts)
        if os.path.exists(full):
            os.remove(full)
        return full

    def result(self, path: str) -> None:
        self.manifest.add_result(self.dir, path)

    def episodes(self, traces: Sequence[Trace], subdir: str = "traces") -> None:
        for t in traces:
            path = self.path(subdir, f"{t.episode_id}.csv")
            write_trace(t, path)
            self.manifest.add_episode(self.dir, path, t.outcome)

    def write_manifest(self) -> None:
        self.manifest.errors = list(self.errors)
        self.manifest.write(os.path.join(self.dir, MANIFEST_FILE))


# ============================================================================
# SHARED STEPS
# ============================================================================

def plant_setup(cfg: Dict[str, Any], seed: int) -> Tuple[PlantSpec, SafetyEnvelope, Trace, NominalProfile]:
    spec = PlantSpec.from_config(cfg)
    env = SafetyEnvelope.from_config(cfg)
    golden = golden_trace(spec, env, seed)
    return spec, env, golden, nominal_profile(golden, spec.warmup_ticks)


def fit_predictor(run: Run, traces: Sequence[Trace]) -> PredictorModel:
    cfg = run.cfg
    spec = PlantSpec.from_config(cfg)
    window = WindowSpec.from_config(cfg, spec.layout)
    dataset = build_dataset(traces, window, spec.layout, run.seed,
                            stride=int(cfg["predictor"]["dataset_stride"]))
    pm = train_predictor(dataset, TrainConfig.from_config(cfg["predictor"]["train"]),
                         cfg["predictor"]["hidden"], run.seed)
    path = run.path("predictor.json")
    save_predictor(pm, path)
    run.manifest.add_checkpoint(run.dir, path)
    history = run.path("predictor_history.csv")
    write_table(pd.DataFrame(pm.history, columns=["train_loss", "val_loss"]).rename_axis("epoch"),
                history, index=True)
    run.result(history)
    return pm


def obtain_predictor(run: Run, path: Optional[str]) -> PredictorModel:
    if path:
        pm = load_predictor(path)
        logger.info(f"[OK] Loaded predictor {path}")
        return pm
    logger.warning("[WARN] no --predictor given; collecting episodes and training one in-process")
    return fit_predictor(run, collect_episodes(run.cfg, run.seed))


def campaign_context(run: Run, predictor_path: Optional[str]) -> Tuple[CampaignContext, EvolutionConfig]:
    _, _, _, profile = plant_setup(run.cfg, run.seed)
    predictor = obtain_predictor(run, predictor_path)
    return CampaignContext.from_config(run.cfg, predictor, profile), EvolutionConfig.from_config(run.cfg)


def archive_rows(meta: Sequence[Dict[str, Any]]) -> List[Dict[str, Any]]:
    return [{"index": i, **m} for i, m in enumerate(meta)]


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_simulate(run: Run, args: argparse.Namespace) -> None:
    spec, _, golden, profile = plant_setup(run.cfg, run.seed)
    run.episodes([golden], subdir=".")
    stats = run.path("sigma_stats.json")
    write_json(stats, {"skip_ticks": spec.warmup_ticks, "rows": len(golden),
                       "shutdown_tick": golden.shutdown_tick, **profile.to_dict()})
    run.result(stats)
    if golden.shutdown_tick is not None:
        run.errors.append(f"golden trace shut down at tick {golden.shutdown_tick}")
    logger.info(f"[OK] golden trace: {len(golden)} rows, shutdown={golden.shutdown_tick}")


def cmd_collect(run: Run, args: argparse.Namespace) -> None:
    traces = collect_episodes(run.cfg, run.seed)
    run.episodes(traces, subdir="episodes")
    split = split_episodes([t.episode_id for t in traces], run.seed)
    dataset = run.path("dataset.json")
    write_json(dataset, {
        "episodes": [{"id": t.episode_id, "path": os.path.join("episodes", f"{t.episode_id}.csv"),
                      "split": split[t.episode_id], "perturbed": not t.attack.is_zero(),
                      "rows": len(t), "outcome": t.outcome.value} for t in traces],
        "train": sum(1 for v in split.values() if v == "train"),
        "validation": sum(1 for v in split.values() if v == "validation"),
    })
    run.result(dataset)
    logger.info(f"[OK] collected {len(traces)} episodes")


def cmd_train_predictor(run: Run, args: argparse.Namespace) -> None:
    if args.data:
        listing = read_json(os.path.join(args.data, "dataset.json"))
        traces = [read_trace(os.path.join(args.data, e["path"])) for e in listing["episodes"]]
        logger.info(f"[OK] read {len(traces)} episodes from {args.data}")
    else:
        traces = collect_episodes(run.cfg, run.seed)
    fit_predictor(run, traces)


def cmd_fuzz(run: Run, args: argparse.Namespace) -> None:
    ctx, evo = campaign_context(run, args.predictor)
    result = run_fuzz(ctx, evo, evo.max_rounds)
    run.errors.extend(result.errors)
    run.episodes(result.traces)
    report = run.path("discovery.csv")
    write_table(discovery_report(result.traces, ctx.spec.sensor_names), report)
    run.result(report)
    emb = run.path("embeddings.csv")
    write_archive(result.archive.as_array(), archive_rows(result.archive.meta), emb)
    run.result(emb)


def cmd_evolve(run: Run, args: argparse.Namespace) -> None:
    ctx, evo = campaign_context(run, args.predictor)
    validation = pool_from_config(ctx, evo, run.cfg, "validation")
    bus = StatusBus(f"evolve/{evo.toggles.label}")
    records = run.fresh(ROUNDS_FILE)
    result = run_evolution(ctx, evo, validation, records_path=records, bus=bus)
    run.errors.extend(result.errors)
    run.result(records)

    det = run.path("detector.json")
    save_detector(result.detector, det)
    run.manifest.add_checkpoint(run.dir, det, parent=args.predictor or "predictor.json")
    run.episodes(result.traces)
    emb = run.path("embeddings.csv")
    write_archive(result.archive.as_array(), archive_rows(result.archive.meta), emb)
    run.result(emb)
    ex = run.path("exemplars.csv")
    write_samples(result.exemplars.samples, ex)
    run.result(ex)
    spread = mean_pairwise_distance(result.archive.as_array())
    summary = run.path("summary.json")
    write_json(summary, {"converged": result.converged, "rounds": len(result.records),
                         "archive_spread": None if math.isnan(spread) else spread,
                         "toggles": evo.toggles.to_dict(), "errors": len(result.errors),
                         "alerts": bus.snapshot()["alerts"]})
    run.result(summary)


def cmd_eval(run: Run, args: argparse.Namespace) -> None:
    ctx, evo = campaign_context(run, args.predictor)
    if args.detector:
        detector = load_detector(args.detector)
    else:
        logger.warning("[WARN] no --detector given; evaluating an untrained detector")
        detector = init_detector(ctx.detector_spec, ctx.profile, run.seed)

    seen: List[Trace] = []
    if args.campaign:
        manifest = CampaignManifest.read(os.path.join(args.campaign, MANIFEST_FILE))
        seen = [read_trace(os.path.join(args.campaign, e["path"])) for e in manifest.episodes]
    holdout = pool_from_config(ctx, evo, run.cfg, "holdout")
    nominal = nominal_traces(ctx, run.seed + int(run.cfg["evolution"]["holdout"]["seed_offset"]),
                             NOMINAL_CALIBRATION_EPISODES)
    threshold = calibrate_threshold(ctx.predictor, nominal, detector.spec, ctx.layout,
                                    float(run.cfg["baseline"]["quantile"]))
    metrics = evaluate_campaign(ctx, detector, seen, holdout, threshold)
    table = run.path("metrics.csv")
    write_table(metrics, table)
    run.result(table)
    for _, row in metrics.iterrows():
        logger.info(f"  {row['model']:<18} {row['split']:<6} acc={row['accuracy']:.3f} "
                    f"f1={row['f1']:.3f} detect={row['detection_rate']:.3f} "
                    f"false_alarm={row['false_alarm_rate']:.3f}")


def cmd_ablate(run: Run, args: argparse.Namespace) -> None:
    ctx, evo = campaign_context(run, args.predictor)
    evo_cfg = run.cfg["evolution"]
    validation = pool_from_config(ctx, evo, run.cfg, "validation")
    seeds = [run.seed + i for i in range(int(evo_cfg["ablation_seeds"]))]
    runs, summary, curves = ablation_campaign(run.cfg, ctx.predictor, ctx.profile, validation, seeds,
                                              int(evo_cfg["ablation_max_rounds"]), run.jobs)
    for name, df in (("ablation_summary.csv", summary), ("ablation_curves.csv", curves)):
        path = run.path(name)
        write_table(df, path)
        run.result(path)
    runs_path = run.fresh("ablation_runs.jsonl")
    for r in runs:
        append_jsonl(runs_path, {"config": r.toggles.label, "seed": r.seed, "converged": r.converged,
                                 "traces_to_stop": r.traces_to_stop, "final_accuracy": r.final_accuracy,
                                 "curve": r.curve, "errors": r.errors})
        if r.errors:
            run.errors.append(f"{r.toggles.label}/s{r.seed}: {r.errors} round error(s)")
    run.result(runs_path)


def cmd_sweep(run: Run, args: argparse.Namespace) -> None:
    ctx, evo = campaign_context(run, args.predictor)
    validation = pool_from_config(ctx, evo, run.cfg, "validation")
    holdout = pool_from_config(ctx, evo, run.cfg, "holdout")
    sweep = run.cfg["sweep"]
    cells, matrix = parameter_sweep(run.cfg, ctx.predictor, ctx.profile, sweep["widths"],
                                    sweep["strides"], validation, holdout, run.jobs)
    cells_path = run.path("sweep_cells.csv")
    write_table(cells, cells_path)
    run.result(cells_path)
    matrix_path = run.path("sweep_matrix.csv")
    write_table(matrix, matrix_path, index=True)
    run.result(matrix_path)


HANDLERS: Dict[str, Callable[[Run, argparse.Namespace], None]] = {
    "simulate": cmd_simulate,
    "collect": cmd_collect,
    "train-predictor": cmd_train_predictor,
    "fuzz": cmd_fuzz,
    "evolve": cmd_evolve,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    try:
        cfg = load_config(args.config, overrides=overrides_from_args(args))
    except ConfigError as e:
        for err in e.errors:
            logger.error(f"[ERROR] {err}")
        return 1
    except ValueError as e:
        logger.error(f"[ERROR] {e}")
        return 1

    run = Run(args.command, cfg, args.out, args.jobs)
    handler = attach_file_log(run.dir)
    logger.info("=" * 60)
    logger.info(f"EvoDefense {args.command} | seed={run.seed} | out={run.dir}")
    logger.info("=" * 60)
    run.write_manifest()

    try:
        HANDLERS[args.command](run, args)
    except TrainingDivergedError as e:
        logger.error(f"[ERROR] {e}")
        run.errors.append(str(e))
    except Exception as e:
        logger.exception(f"[ERROR] {args.command} failed")
        run.errors.append(f"{type(e).__name__}: {e}")
    finally:
        run.write_manifest()
        logging.getLogger().removeHandler(handler)
        handler.close()

    if run.errors:
        logger.error(f"[ERROR] {args.command} finished with {len(run.errors)} error(s)")
        return 1
    logger.info(f"[OK] {args.command} done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
