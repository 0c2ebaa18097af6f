# main.py
"""Command-line entry point: ``python main.py [global flags] <command> ...``."""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from config import CUT_STYLES, DATASET_COUNT_PER_TASK, SAFETY_AGGRESSIVE_SPEED, SWEEP_YOUNGS
from errors import CuttingSimError
from experiments import (
    EpisodeSettings,
    ablation_summary,
    dataset_tasks,
    evaluate_record,
    fit_safety,
    gen_dataset,
    safety_ablation,
    sweep_trend,
    sweep_youngs,
)
from safety import ForceModel, samples_to_frame
from simulation import replay, run_episode
from utils import load_config, setup_logging, write_frame, write_json


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knife-mpm", description="Knife-cutting MPM simulation and experiment harness")
    parser.add_argument("--config", help="JSON config file (sections sim, cutting, contact, materials, scene, task, style, safety)")
    parser.add_argument("--seed", type=int, help="override sim.seed")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--deterministic", dest="reduction", action="store_const", const="deterministic", help="bit-reproducible scatter (default)")
    mode.add_argument("--fast", dest="reduction", action="store_const", const="fast", help="faster, order-dependent scatter")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument("--fmax", type=float, help="force limit in N for the safety module")
    parser.add_argument("--no-safety", action="store_true", help="disable trajectory clamping")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for multi-episode commands")
    parser.add_argument("--log-level", default="INFO")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", help="run one episode from the config")

    sweep = sub.add_parser("sweep-youngs", help="peak force and post-impact speed against E")
    sweep.add_argument("--E", type=float, nargs="+", default=list(SWEEP_YOUNGS), help="Young's moduli in Pa")

    ablation = sub.add_parser("safety-ablation", help="episodes with the safety module off and on")
    ablation.add_argument("--model", help="fitted force model JSON; fitted inline when omitted")
    ablation.add_argument("--speed", type=float, default=SAFETY_AGGRESSIVE_SPEED, help="aggressive commanded speed in m/s")

    dataset = sub.add_parser("gen-dataset", help="augmented episodes with paired instructions")
    dataset.add_argument("--count", type=int, default=DATASET_COUNT_PER_TASK, help="episodes per task")
    dataset.add_argument("--styles", nargs="+", default=list(CUT_STYLES), choices=CUT_STYLES)
    dataset.add_argument("--seeds", type=int, nargs="+", help="explicit episode seeds (one per episode)")

    sub.add_parser("fit-safety", help="collect force samples and fit the force model")

    for name, help_text in (("eval", "recompute verdict and momentum audit of a record"), ("replay", "re-run a record and compare forces")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("record", help="episode record directory")
    return parser


def _load(args):
    cfg = load_config(args.config)
    sim = cfg.sim
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.reduction:
        sim = replace(sim, reduction=args.reduction)
    cfg.sim = sim
    if args.fmax is not None:
        cfg.safety.F_max = args.fmax
    if args.no_safety:
        cfg.safety.enabled = False
    return cfg


def _settings(cfg) -> EpisodeSettings:
    return EpisodeSettings(cfg.sim, cutting=cfg.cutting, contact=cfg.contact, style=cfg.style)


def _force_model(cfg) -> ForceModel | None:
    if not cfg.safety.enabled or not cfg.safety.model_path:
        return None
    return ForceModel.load(cfg.safety.model_path)


def _report(data) -> None:
    print(json.dumps(data, indent=2, default=str))


def cmd_simulate(args, cfg) -> int:
    record = run_episode(
        cfg.scene,
        cfg.task,
        cfg.sim,
        cutting=cfg.cutting,
        contact=cfg.contact,
        style=cfg.style,
        force_model=_force_model(cfg),
        F_max=cfg.safety.F_max,
    )
    path = record.save(Path(args.out) / f"episode_seed{cfg.sim.seed}")
    _report({"status": record.status, "path": str(path), "instruction": record.instruction, "summary": record.summary, "diagnostics": record.diagnostics})
    return 0 if record.ok else 1


def cmd_sweep(args, cfg) -> int:
    table, warnings = sweep_youngs(cfg.scene, cfg.task, _settings(cfg), args.E, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frame(table, out / "sweep_youngs.csv")
    trend = sweep_trend(table)
    write_json(trend, out / "sweep_trend.json")
    _report({"rows": len(table), "flagged": int(table["flagged"].sum()), "trend": trend, "warnings": warnings})
    return 0


def cmd_fit_safety(args, cfg) -> int:
    model, samples, warnings = fit_safety(cfg.scene, cfg.task, _settings(cfg), kind=cfg.safety.kind, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frame(samples_to_frame(samples), out / "safety_samples.csv")
    model.save(out / "force_model.json")
    _report({**model.to_dict(), "warnings": warnings})
    return 0


def cmd_safety_ablation(args, cfg) -> int:
    model = ForceModel.load(args.model) if args.model else _force_model(cfg)
    materials = cfg.materials or None
    episodes, warnings = safety_ablation(
        cfg.scene, cfg.task, _settings(cfg), materials, model, cfg.safety.F_max, args.speed, workers=args.workers
    )
    summary = ablation_summary(episodes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_frame(episodes, out / "safety_ablation_episodes.csv")
    write_frame(summary, out / "safety_ablation.csv")
    _report({"summary": summary.to_dict(orient="records"), "warnings": warnings})
    return 0 if (episodes["status"] == "ok").all() else 1


def cmd_gen_dataset(args, cfg) -> int:
    tasks = dataset_tasks(cfg.scene.kind, styles=args.styles, base=replace(cfg.task, object_kind=cfg.scene.kind))
    manifest, warnings = gen_dataset(
        tasks,
        args.out,
        _settings(cfg),
        count=args.count,
        base_scene=cfg.scene,
        root_seed=cfg.sim.seed,
        seeds=args.seeds,
        workers=args.workers,
    )
    _report(
        {
            "episodes": len(manifest),
            "successes": int(manifest["success"].sum()),
            "failed": int((manifest["status"] != "ok").sum()),
            "partial": manifest.attrs["partial"],
            "warnings": warnings,
        }
    )
    return 1 if manifest.attrs["partial"] else 0


def cmd_eval(args, cfg) -> int:
    result = evaluate_record(args.record)
    _report(result)
    return 0 if result["status"] == "ok" and result["audit"]["passed"] else 1


def cmd_replay(args, cfg) -> int:
    rerun, identical = replay(args.record)
    _report({"status": rerun.status, "identical": identical, "peak_force": rerun.peak_force})
    return 0 if identical else 1


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep-youngs": cmd_sweep,
    "fit-safety": cmd_fit_safety,
    "safety-ablation": cmd_safety_ablation,
    "gen-dataset": cmd_gen_dataset,
    "eval": cmd_eval,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging(args.log_level)
        cfg = _load(args)
        return COMMANDS[args.command](args, cfg)
    except CuttingSimError as exc:
        logging.error(f"{type(exc).__name__}: {exc}")
        return 2
    except OSError as exc:
        logging.error(f"I/O error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
