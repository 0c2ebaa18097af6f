# experiments.py
"""Reproduction experiments built on run_episode: the stiffness sweep,
the safety-module ablation, safety sample collection and dataset generation."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from pathlib import Path

import numpy as np
import pandas as pd

from config import (
    CUT_STYLES,
    DATASET_COUNT_PER_TASK,
    DEFAULT_FORCE_MODEL,
    F_MAX,
    FOOD_KINDS,
    RATIO_GRID,
    SAFETY_AGGRESSIVE_SPEED,
    SAFETY_VELOCITY_GRID,
    SAFETY_YIELD_GRID,
    SAFETY_YOUNGS_GRID,
    SPLIT_COUNTS,
    SWEEP_YOUNGS,
)
from contact_sdf import ContactParams
from cutting import CuttingParams
from errors import ConfigError
from instructions import CutSpec, generate_instruction
from mpm_core import Material, SimConfig
from safety import ForceModel, collect_samples, fit_model
from simulation import EpisodeRecord, run_episode
from trajectory_planner import (
    AugmentRanges,
    CutState,
    CutTask,
    SceneSpec,
    StyleParams,
    augment,
    cut_axis_of,
    evaluate_success,
    object_aabb,
)
from utils import spawn_seeds, write_frame

SWEEP_COLUMNS = ["E", "F_peak", "v_post", "t_peak_index", "t_vmin_index", "status", "flagged"]
ABLATION_COLUMNS = ["module", "material", "E", "sigma_y", "v_cmd", "max_speed", "peak_force", "status"]
MANIFEST_COLUMNS = [
    "episode",
    "path",
    "seed",
    "object_kind",
    "style",
    "state",
    "instruction",
    "status",
    "success",
    "peak_force",
    "error",
]


@dataclass
class EpisodeSettings:
    """Engine-side settings shared by every episode of one experiment."""

    config: SimConfig
    cutting: CuttingParams | None = None
    contact: ContactParams | None = None
    style: StyleParams | None = None

    def run(self, scene: SceneSpec, task: CutTask, **kwargs) -> EpisodeRecord:
        return run_episode(
            scene,
            task,
            self.config,
            cutting=self.cutting,
            contact=self.contact,
            style=self.style,
            **kwargs,
        )


def _run_job(settings: EpisodeSettings, scene: SceneSpec, task: CutTask, kwargs: dict) -> EpisodeRecord:
    return settings.run(scene, task, **kwargs)


def run_jobs(settings: EpisodeSettings, jobs, workers: int = 1) -> list[EpisodeRecord]:
    """Run ``(scene, task, kwargs)`` jobs, one engine per job, in input order."""
    jobs = list(jobs)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(partial(_run_job, settings), *zip(*jobs)))
    return [_run_job(settings, scene, task, kwargs) for scene, task, kwargs in jobs]


def post_impact_speed(record: EpisodeRecord) -> tuple[float, int | None]:
    """Minimum knife speed after first contact and the step it occurs at."""
    first = record.summary.get("first_contact_step")
    if first is None or not len(record.knife):
        return float("nan"), None
    after = record.knife["speed"].to_numpy()[first:]
    i = int(np.argmin(after))
    return float(after[i]), first + i


def sweep_youngs(scene: SceneSpec, task: CutTask, settings: EpisodeSettings, E_values=SWEEP_YOUNGS, workers: int = 1):
    """Peak force and post-impact knife speed for each Young's modulus.

    Returns ``(table, warnings)``. Diverged runs keep their row with
    ``flagged=True`` and NaN measurements.
    """
    E_values = [float(E) for E in E_values]
    if len(E_values) < 2:
        raise ConfigError("A stiffness sweep needs at least two E values")
    jobs = [(replace(scene, material=replace(scene.material, E=E)), task, {}) for E in E_values]
    records = run_jobs(settings, jobs, workers)

    rows, warnings = [], []
    for E, record in zip(E_values, records):
        if not record.ok:
            message = f"Sweep run E={E:g} Pa {record.status}: {record.diagnostics.get('error', 'unknown error')}"
            logging.warning(message)
            warnings.append(message)
            rows.append({"E": E, "F_peak": np.nan, "v_post": np.nan, "t_peak_index": -1, "t_vmin_index": -1, "status": record.status, "flagged": True})
            continue
        v_post, vmin_index = post_impact_speed(record)
        peak_index = int(record.force["Fmag"].to_numpy().argmax()) if len(record.force) else -1
        rows.append(
            {
                "E": E,
                "F_peak": record.peak_force,
                "v_post": v_post,
                "t_peak_index": peak_index,
                "t_vmin_index": -1 if vmin_index is None else vmin_index,
                "status": record.status,
                "flagged": vmin_index is None,
            }
        )
        logging.info(f"Sweep E={E:g} Pa: F_peak={record.peak_force:.3f} N, v_post={v_post:.4f} m/s")
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS), warnings


def sweep_trend(table: pd.DataFrame) -> dict:
    """Monotonicity and linear-fit R² of the sweep measurements."""
    clean = table[~table["flagged"]]
    result = {}
    for column in ("F_peak", "v_post"):
        x, y = clean["E"].to_numpy(), clean[column].to_numpy()
        if len(x) < 2:
            result[column] = {"increasing": False, "decreasing": False, "r2": float("nan")}
            continue
        slope, intercept = np.polyfit(x, y, 1)
        ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        result[column] = {
            "increasing": bool(np.all(np.diff(y) > 0)),
            "decreasing": bool(np.all(np.diff(y) < 0)),
            "slope": float(slope),
            "r2": 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0,
        }
    return result


def default_safety_materials(base: Material | None = None) -> list[Material]:
    base = base or Material()
    return [
        replace(base, E=E, sigma_y=sy, name=f"E{E:g}_sy{sy:g}")
        for E in SAFETY_YOUNGS_GRID
        for sy in SAFETY_YIELD_GRID
    ]


def _sample_jobs(scene: SceneSpec, task: CutTask, pairs) -> list[tuple]:
    return [(replace(scene, material=material), replace(task, v=float(v)), {}) for v, material in pairs]


def collect_safety_samples(scene: SceneSpec, task: CutTask, settings: EpisodeSettings, velocities=SAFETY_VELOCITY_GRID, materials=None, workers: int = 1):
    """(velocity, material, peak force) samples from unclamped episodes."""
    materials = materials or default_safety_materials(scene.material)
    return collect_samples(velocities, materials, lambda pairs: run_jobs(settings, _sample_jobs(scene, task, pairs), workers))


def fit_safety(scene: SceneSpec, task: CutTask, settings: EpisodeSettings, kind: str = DEFAULT_FORCE_MODEL, velocities=SAFETY_VELOCITY_GRID, materials=None, workers: int = 1):
    """Collect samples and fit a force model; returns ``(model, samples, warnings)``."""
    samples, warnings = collect_safety_samples(scene, task, settings, velocities, materials, workers)
    return fit_model(samples, kind), samples, warnings


def safety_ablation(
    scene: SceneSpec,
    task: CutTask,
    settings: EpisodeSettings,
    materials=None,
    model: ForceModel | None = None,
    F_max: float = F_MAX,
    v_cmd: float = SAFETY_AGGRESSIVE_SPEED,
    workers: int = 1,
):
    """Paired episodes with the safety module off and on.

    Returns ``(episodes, warnings)``; one row per (module, material).
    Without a model one is fitted inline from the default sample grid.
    """
    materials = materials or default_safety_materials(scene.material)
    warnings = []
    if model is None:
        model, _, fit_warnings = fit_safety(scene, task, settings, materials=materials, workers=workers)
        warnings += fit_warnings
    aggressive = replace(task, v=float(v_cmd))
    jobs = []
    for module in ("off", "on"):
        kwargs = {} if module == "off" else {"force_model": model, "F_max": F_max}
        jobs += [(replace(scene, material=m), aggressive, kwargs) for m in materials]
    records = run_jobs(settings, jobs, workers)

    rows = []
    for (job_scene, _, kwargs), record in zip(jobs, records):
        module = "on" if kwargs else "off"
        material = job_scene.material
        if not record.ok:
            message = f"Ablation run ({module}, {material.name}) {record.status}: {record.diagnostics.get('error', 'unknown error')}"
            logging.warning(message)
            warnings.append(message)
        max_speed = float(record.knife["speed"].max()) if len(record.knife) else np.nan
        rows.append(
            {
                "module": module,
                "material": material.name,
                "E": material.E,
                "sigma_y": material.sigma_y,
                "v_cmd": record.summary.get("v_safe", v_cmd) if module == "on" else v_cmd,
                "max_speed": max_speed,
                "peak_force": record.peak_force if record.ok else np.nan,
                "status": record.status,
            }
        )
    return pd.DataFrame(rows, columns=ABLATION_COLUMNS), warnings


def ablation_summary(episodes: pd.DataFrame) -> pd.DataFrame:
    """Average maximum cutting speed and peak force per module setting."""
    ok = episodes[episodes["status"] == "ok"]
    summary = ok.groupby("module", sort=False).agg(
        avg_max_speed=("max_speed", "mean"),
        peak_force=("peak_force", "max"),
        episodes=("status", "size"),
    )
    return summary.reindex(["off", "on"]).reset_index()


def dataset_states() -> list[CutState]:
    """Thirteen cut states: nine ratios, the middle and three split counts."""
    return [CutState.ratio_cut(r) for r in RATIO_GRID] + [CutState.middle()] + [CutState.split(k) for k in SPLIT_COUNTS]


def dataset_tasks(object_kind: str, styles=CUT_STYLES, states=None, base: CutTask | None = None) -> list[CutTask]:
    base = base or CutTask(object_kind=object_kind)
    states = dataset_states() if states is None else states
    return [replace(base, style=style, state=state, object_kind=object_kind) for style in styles for state in states]


def _dataset_seeds(n: int, root_seed: int, seeds=None) -> list[int]:
    if seeds is None:
        return spawn_seeds(root_seed, n)
    seeds = [int(s) for s in seeds]
    if len(seeds) != n:
        raise ConfigError(f"Expected {n} seeds, got {len(seeds)}")
    duplicates = sorted({s for s in seeds if seeds.count(s) > 1})
    if duplicates:
        raise ConfigError(f"Duplicate dataset seeds: {', '.join(map(str, duplicates))}")
    return seeds


def gen_dataset(
    tasks,
    out_dir,
    settings: EpisodeSettings,
    count: int = DATASET_COUNT_PER_TASK,
    base_scene: SceneSpec | None = None,
    root_seed: int = 0,
    seeds=None,
    workers: int = 1,
):
    """Augmented episodes with paired instructions, one record directory each.

    Returns ``(manifest, warnings)``. The manifest is also written to
    ``out_dir/manifest.csv``; rows whose record could not be written carry
    the error and leave the manifest marked partial.
    """
    tasks = list(tasks)
    if count < 1:
        raise ConfigError("Episode count per task must be at least 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = _dataset_seeds(len(tasks) * count, root_seed, seeds)

    jobs, meta = [], []
    for i, seed in enumerate(seeds):
        task = tasks[i // count]
        base = replace(base_scene, kind=task.object_kind) if base_scene is not None else SceneSpec(kind=task.object_kind)
        scene, episode_task = augment(task, AugmentRanges.around(base, task), seed, base, settings.config)
        instruction = None
        if scene.kind in FOOD_KINDS:
            instruction = generate_instruction(CutSpec(scene.kind, episode_task.style, episode_task.state), rng=seed)
        jobs.append((scene, episode_task, {"instruction": instruction}))
        meta.append((f"episode_{i:05d}", seed, episode_task, instruction))
    logging.info(f"Generating {len(jobs)} episodes for {len(tasks)} tasks into {out_dir}")
    records = run_jobs(settings, jobs, workers)

    rows, warnings = [], []
    for (name, seed, task, instruction), record in zip(meta, records):
        row = {
            "episode": name,
            "path": name,
            "seed": seed,
            "object_kind": task.object_kind,
            "style": task.style,
            "state": task.state.label,
            "instruction": instruction,
            "status": record.status,
            "success": bool(record.verdict.success) if record.verdict is not None else False,
            "peak_force": record.peak_force,
            "error": "",
        }
        try:
            record.save(out_dir / name)
        except OSError as exc:
            message = f"Could not write {name}: {exc}"
            logging.error(message)
            warnings.append(message)
            row["path"], row["error"] = "", str(exc)
        rows.append(row)
    manifest = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    manifest.attrs["partial"] = bool((manifest["error"] != "").any())
    write_frame(manifest, out_dir / "manifest.csv")
    if manifest.attrs["partial"]:
        logging.warning(f"Manifest in {out_dir} is partial: {int((manifest['error'] != '').sum())} records missing")
    return manifest, warnings


def evaluate_record(path) -> dict:
    """Recompute the verdict and the momentum audit of a saved episode."""
    record = EpisodeRecord.load(path)
    result = {"status": record.status, "audit": record.momentum_audit()}
    if not record.ok or record.trajectory is None:
        result["verdict"] = None
        return result
    scene = SceneSpec.from_dict(record.snapshot["scene"])
    lo, hi = object_aabb(scene)
    axis = cut_axis_of((lo, hi))
    traj = record.trajectory
    runs = traj.contact_runs()
    blade_axis = traj.rotation_matrices()[runs[0][0] if runs else 0][:, 2]
    verdict = evaluate_success(
        record.summary.get("achieved_planes", []),
        record.snapshot["target_planes"],
        float(hi[axis] - lo[axis]),
        blade_axis,
        np.eye(3)[axis],
        segments=record.final_segments,
    )
    result["verdict"] = verdict.to_dict()
    result["matches_saved"] = record.verdict is not None and verdict.to_dict() == record.verdict.to_dict()
    return result
