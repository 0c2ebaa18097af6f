# simulation.py
"""Cutting episodes: object sampling, the stepping loop and episode records."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from config import (
    BOARD_TOP,
    F_MAX,
    FOOD_KINDS,
    PARTICLE_MARGIN_CELLS,
    PARTICLES_PER_CELL_AXIS,
    REFERENCE_YIELD_STRESS,
    REFERENCE_YOUNGS,
)
from contact_sdf import ApproachWindow, ContactParams, ForceAccumulator, contact_strength, halfspace, resolve_grid_contact, wedge_blade
from cutting import (
    CuttingParams,
    KnifeTool,
    SegmentTracker,
    damage_update,
    effective_moduli,
    k2_scale,
    resolution_scaled_thresholds,
    tip_force,
)
from errors import DegenerateObjectError, NoSafeVelocityError, NumericalDivergenceError, OutOfDomainError
from instructions import CutSpec, generate_instruction
from mpm_core import (
    GridState,
    Material,
    ParticleState,
    SimConfig,
    apply_plasticity,
    check_timestep,
    g2p,
    grid_update,
    interpolate,
    p2g,
    particle_moduli,
    totals,
)
from safety import ForceModel, clamp_trajectory, safe_velocity
from trajectory_planner import (
    CutTask,
    SceneSpec,
    StyleParams,
    Trajectory,
    Verdict,
    cut_axis_of,
    cut_planes,
    evaluate_success,
    generate_trajectory,
    object_aabb,
    object_shape,
)
from utils import atomic_directory, read_frame, read_json, spawn_generators, write_frame, write_json

AUDIT_RTOL = 1e-12
REFERENCE_MATERIAL = Material(E=REFERENCE_YOUNGS, sigma_y=REFERENCE_YIELD_STRESS, name="reference")


def sample_object_particles(scene: SceneSpec, config: SimConfig, rng=None, board_top: float = BOARD_TOP) -> ParticleState:
    """Fill the scene object with particles on a jittered lattice.

    The lattice spacing is ``dx / PARTICLES_PER_CELL_AXIS``; each particle
    carries the lattice cell volume and ``rho`` times that volume as mass.
    """
    shape = object_shape(scene, board_top)
    lo, hi = shape.aabb()
    spacing = config.dx / PARTICLES_PER_CELL_AXIS
    axes = [np.arange(lo[i] + 0.5 * spacing, hi[i], spacing) for i in range(3)]
    if any(len(a) == 0 for a in axes):
        raise DegenerateObjectError(f"{scene.kind} is thinner than one particle spacing")
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    inside = lattice[shape.distance(lattice) < 0.0]
    if len(inside) == 0:
        raise DegenerateObjectError(f"No particles fit inside {scene.kind}")
    rng = np.random.default_rng(scene.seed) if rng is None else rng
    x = inside + rng.uniform(-0.25 * spacing, 0.25 * spacing, size=inside.shape)
    margin = PARTICLE_MARGIN_CELLS * config.dx
    outside = np.flatnonzero(np.any((x < margin) | (x > config.domain_size - margin), axis=1))
    if outside.size:
        raise OutOfDomainError("Object does not fit inside the simulation domain", int(outside[0]))
    volume = spacing**3
    return ParticleState.create(x, m=scene.material.rho * volume, V0=volume)


@dataclass
class CuttingSimulation:
    """One engine instance: particles, grid, knife and the logged series."""

    config: SimConfig
    particles: ParticleState
    trajectory: Trajectory
    materials: list[Material]
    cutting: CuttingParams = field(default_factory=CuttingParams)
    contact: ContactParams = field(default_factory=ContactParams)
    board_top: float = BOARD_TOP

    def __post_init__(self):
        config = self.config
        self.grid = GridState.empty(config.n_grid, config.dx)
        self.thresholds = resolution_scaled_thresholds(config, self.cutting.damage_rate)
        rotation, position = self.trajectory.pose_at(self.trajectory.t[0])[:2]
        blade = wedge_blade(length=self.trajectory.params.blade_length, rotation=rotation, translation=position)
        self.knife = KnifeTool(shape=blade, k2=k2_scale(self.materials[0], REFERENCE_MATERIAL, self.cutting.k2_exponent_E, self.cutting.k2_exponent_yield))
        self.board = halfspace((0.0, 1.0, 0.0), self.board_top)
        self.rest_x = self.particles.x.copy()
        self.damage_pass = np.full(self.particles.count, -1, dtype=np.int64)
        self.knife_force = ForceAccumulator(config.dt_acc)
        self.board_force = ForceAccumulator(config.dt_acc)
        self.segments = SegmentTracker(self.cutting.link_radius_cells * config.dx, self.cutting.damage_cut)
        self.step_impulses: list[np.ndarray] = []
        self.knife_rows: list[tuple] = []
        self.j_rows: list[tuple] = []
        self.tau = float(self.trajectory.t[0])
        self.t = 0.0
        self.steps = 0
        self.window_steps = 0
        self.windows = 0
        self.approach = ApproachWindow(config.acc_steps)
        self.first_contact_step: int | None = None
        self._window_j = [np.inf, -np.inf, 0]
        self._contact_runs = self.trajectory.contact_runs()

    @property
    def done(self) -> bool:
        return self.tau >= self.trajectory.t[-1] or self.t >= self.config.max_time - 1e-12

    def _pass_index(self, segment: int) -> int:
        for i, (start, end) in enumerate(self._contact_runs):
            if start <= segment < end:
                return i
        return -1

    def _move_knife(self, dt: float) -> tuple[str, int]:
        traj = self.trajectory
        self.tau = min(self.tau + self.knife.u * dt, float(traj.t[-1]))
        rotation, position, segment = traj.pose_at(self.tau)
        phase = traj.phase[segment]
        if phase == "approach":
            self.knife.u = 1.0
        self.knife.s0 = float(traj.v_cmd[segment])
        self.knife.move_to(rotation, position, dt)
        return phase, segment

    def step(self) -> dict:
        """Advance one timestep; returns the step summary."""
        config, particles, grid, dt = self.config, self.particles, self.grid, self.config.dt
        phase, segment = self._move_knife(dt)

        mu, lam = particle_moduli(particles, self.materials)
        if self.cutting.topology_update:
            mu, lam = effective_moduli(mu, lam, particles.D, self.cutting.eps_soft)
        yielded = apply_plasticity(particles, self.materials, config, mu=mu)
        stencil = p2g(particles, grid, config, moduli=(mu, lam))
        grid_update(grid, config)

        knife_hit = resolve_grid_contact(grid, self.knife.shape, self.knife.velocity_at, self.contact, config.dx)
        board_hit = resolve_grid_contact(grid, self.board, np.zeros_like, self.contact, config.dx)
        self.knife_force.add(knife_hit.impulse)
        self.board_force.add(board_hit.impulse)
        self.step_impulses.append(knife_hit.impulse)
        if self.contact.approach_window:
            c_hat = contact_strength(self.approach.push(knife_hit.approach), config)
        else:
            c_hat = contact_strength(knife_hit.approach, config)
        if knife_hit.nodes.size and self.first_contact_step is None:
            self.first_contact_step = self.steps

        phi, normal = self.knife.shape.sample(particles.x)
        v_rel = interpolate(grid.v_before, stencil) - self.knife.velocity_at(particles.x)
        v_n = np.sum(v_rel * normal, axis=1)
        extra_dv = None
        if c_hat > 0.0:
            band = self.thresholds.band * self.cutting.tip_band_scale
            extra_dv = tip_force(particles.x, particles.m, self.knife.shape, self.cutting.tip_force, dt, band)

        summary = g2p(grid, particles, config, stencil, extra_dv=extra_dv)
        D_new = damage_update(particles.D, phi, c_hat, v_n, self.knife.stroke_dir, self.thresholds, dt, self.cutting.damage_mode)
        fresh = (D_new > 0.0) & (self.damage_pass < 0)
        if fresh.any():
            self.damage_pass[fresh] = self._pass_index(segment)
        particles.D = D_new
        if phase == "contact":
            self.knife.resist(c_hat, dt, self.cutting.speed_floor)

        self.steps += 1
        self.t = self.steps * dt
        self.knife_rows.append((self.t, self.knife.speed, self.knife.u, c_hat, phase))
        w = self._window_j
        w[0], w[1], w[2] = min(w[0], summary["J_min"]), max(w[1], summary["J_max"]), w[2] + summary["clamps"]
        self.window_steps += 1
        if self.window_steps == config.acc_steps:
            self._close_window()
        summary.update(c_hat=c_hat, yielded=yielded, phase=phase, contact_nodes=int(knife_hit.nodes.size))
        return summary

    def _close_window(self) -> None:
        record = self.knife_force.flush(self.t)
        self.board_force.flush(self.t)
        j_min, j_max, clamps = self._window_j
        self.j_rows.append((self.t, j_min, j_max, clamps))
        if clamps:
            logging.debug(f"t={self.t:.4f}s {clamps} determinant clamps, J in [{j_min:.3f}, {j_max:.3f}]")
        self._window_j = [np.inf, -np.inf, 0]
        self.window_steps = 0
        self.windows += 1
        if self.cutting.segment_every > 0 and self.windows % self.cutting.segment_every == 0:
            self.segments.update(self.particles, self.t)
        if not np.isfinite(record.magnitude):
            raise NumericalDivergenceError("non-finite contact force", {"t": self.t})

    def run(self) -> None:
        while not self.done:
            self.step()
        if self.window_steps:
            self._close_window()
        self.segments.update(self.particles, self.t)

    def achieved_planes(self, cut_axis: int) -> list[float]:
        """Median rest-position coordinate of the particles each contact pass damaged."""
        planes = []
        for i in range(len(self._contact_runs)):
            hit = self.damage_pass == i
            if hit.any():
                planes.append(float(np.median(self.rest_x[hit, cut_axis])))
        return planes


def _force_frame(accumulator: ForceAccumulator) -> pd.DataFrame:
    rows = [(r.t, *r.F_avg, r.magnitude, *r.window_impulse) for r in accumulator.records]
    return pd.DataFrame(rows, columns=["t", "Fx", "Fy", "Fz", "Fmag", "Jx", "Jy", "Jz"])


@dataclass
class EpisodeRecord:
    """Everything needed to audit and replay one episode."""

    status: str
    seed: int
    snapshot: dict
    instruction: str | None = None
    force: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["t", "Fx", "Fy", "Fz", "Fmag", "Jx", "Jy", "Jz"]))
    board_force: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["t", "Fx", "Fy", "Fz", "Fmag", "Jx", "Jy", "Jz"]))
    knife: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["t", "speed", "u", "c_hat", "phase"]))
    jstats: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["t", "Jmin", "Jmax", "clamps"]))
    segments: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["t", "segments"]))
    trajectory: Trajectory | None = None
    source_trajectory: Trajectory | None = None
    verdict: Verdict | None = None
    summary: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def peak_force(self) -> float:
        return float(self.force["Fmag"].max()) if len(self.force) else 0.0

    @property
    def final_segments(self) -> int | None:
        return int(self.segments["segments"].iloc[-1]) if len(self.segments) else None

    def momentum_audit(self, rtol: float = AUDIT_RTOL) -> dict:
        """Check the force series against the logged contact impulses.

        Each window's force must equal its impulse over ``dt_acc`` exactly;
        episode totals (step impulses, window impulses, force times
        ``dt_acc``) must agree to ``rtol``.
        """
        if not len(self.force):
            return {"impulse": [0.0] * 3, "force_impulse": [0.0] * 3, "exact": True, "relative_error": 0.0, "passed": True}
        dt_acc = self.snapshot["sim"]["dt_acc"]
        J = self.force[["Jx", "Jy", "Jz"]].to_numpy()
        F = self.force[["Fx", "Fy", "Fz"]].to_numpy()
        impulse = J.sum(axis=0)
        force_impulse = (F * dt_acc).sum(axis=0)
        logged = np.asarray(self.summary.get("step_impulse_total", impulse), dtype=np.float64)
        scale = max(float(np.abs(J).sum(axis=0).max()), np.finfo(float).tiny)
        error = max(np.abs(impulse - force_impulse).max(), np.abs(impulse - logged).max()) / scale
        exact = bool(np.array_equal(F, J / dt_acc))
        return {
            "impulse": impulse.tolist(),
            "force_impulse": force_impulse.tolist(),
            "exact": exact,
            "relative_error": float(error),
            "passed": exact and error <= rtol,
        }

    def save(self, path) -> Path:
        path = Path(path)
        with atomic_directory(path) as tmp:
            write_frame(self.force, tmp / "force.csv")
            write_frame(self.board_force, tmp / "board_force.csv")
            write_frame(self.knife, tmp / "knife.csv")
            write_frame(self.jstats, tmp / "jstats.csv")
            write_frame(self.segments, tmp / "segments.csv")
            if self.trajectory is not None:
                write_frame(self.trajectory.to_frame(), tmp / "trajectory.csv")
            if self.source_trajectory is not None:
                write_frame(self.source_trajectory.to_frame(), tmp / "source_trajectory.csv")
            if self.verdict is not None:
                write_json(self.verdict.to_dict(), tmp / "verdict.json")
            write_json(
                {
                    "status": self.status,
                    "seed": self.seed,
                    "instruction": self.instruction,
                    "snapshot": self.snapshot,
                    "summary": self.summary,
                    "diagnostics": self.diagnostics,
                },
                tmp / "metadata.json",
            )
        return path

    @classmethod
    def load(cls, path) -> "EpisodeRecord":
        path = Path(path)
        meta = read_json(path / "metadata.json")
        verdict = None
        if (path / "verdict.json").exists():
            data = read_json(path / "verdict.json")
            data["plane_errors"] = tuple(data["plane_errors"])
            verdict = Verdict(**data)
        snap = meta["snapshot"]
        params = StyleParams.from_dict(snap["style"]) if "style" in snap else None
        trajectories = {}
        for name in ("trajectory", "source_trajectory"):
            if (path / f"{name}.csv").exists():
                trajectories[name] = Trajectory.from_frame(read_frame(path / f"{name}.csv"), params, snap.get("aabb"))
        return cls(
            status=meta["status"],
            seed=meta["seed"],
            snapshot=meta["snapshot"],
            instruction=meta.get("instruction"),
            force=read_frame(path / "force.csv"),
            board_force=read_frame(path / "board_force.csv"),
            knife=read_frame(path / "knife.csv"),
            jstats=read_frame(path / "jstats.csv"),
            segments=read_frame(path / "segments.csv"),
            trajectory=trajectories.get("trajectory"),
            source_trajectory=trajectories.get("source_trajectory"),
            verdict=verdict,
            summary=meta.get("summary", {}),
            diagnostics=meta.get("diagnostics", {}),
        )


def snapshot(scene: SceneSpec, task: CutTask, config: SimConfig, cutting: CuttingParams, contact: ContactParams, style: StyleParams) -> dict:
    return {
        "sim": config.to_dict(),
        "scene": scene.to_dict(),
        "task": task.to_dict(),
        "cutting": cutting.to_dict(),
        "contact": asdict(contact),
        "style": asdict(style),
        "dx": config.dx,
    }


def plan_episode(scene: SceneSpec, task: CutTask, style: StyleParams | None = None, rng=None):
    """Target planes and the knife trajectory for a scene, from its AABB."""
    aabb = object_aabb(scene)
    axis = cut_axis_of(aabb)
    planes = cut_planes(aabb, task.state, axis)
    return aabb, axis, planes, generate_trajectory(task, planes, aabb, style, rng=rng)


def run_episode(
    scene: SceneSpec,
    task: CutTask,
    config: SimConfig | None = None,
    *,
    cutting: CuttingParams | None = None,
    contact: ContactParams | None = None,
    style: StyleParams | None = None,
    trajectory: Trajectory | None = None,
    force_model=None,
    F_max: float = F_MAX,
    v_safe: float | None = None,
    instruction: str | None = None,
) -> EpisodeRecord:
    """Plan, optionally clamp, simulate and evaluate one cutting episode.

    The trajectory is clamped to ``v_safe`` when given, otherwise to the
    speed ``force_model`` allows under ``F_max``. Divergence, domain escape
    and infeasible safety limits produce a record with ``status="failed"``
    and diagnostics instead of raising.
    """
    config = config or SimConfig()
    cutting = cutting or CuttingParams()
    contact = contact or ContactParams(query_aabb_pad=2.0 * config.dx)
    materials = [scene.material]
    check_timestep(config, materials)
    jitter_rng, style_rng = spawn_generators([config.seed, scene.seed], 2)

    aabb, axis, planes, planned = plan_episode(scene, task, style, rng=style_rng)
    traj = trajectory if trajectory is not None else planned
    if instruction is None and scene.kind in FOOD_KINDS:
        instruction = generate_instruction(CutSpec(scene.kind, task.style, task.state), rng=config.seed)
    record = EpisodeRecord(
        status="ok",
        seed=config.seed,
        snapshot=snapshot(scene, task, config, cutting, contact, traj.params),
        instruction=instruction,
    )
    record.snapshot["target_planes"] = planes
    record.snapshot["aabb"] = [aabb[0].tolist(), aabb[1].tolist()]
    record.snapshot["trajectory_source"] = "planned" if trajectory is None else "given"

    if force_model is not None or v_safe is not None:
        record.snapshot["safety"] = {
            "force_model": None if force_model is None else force_model.to_dict(),
            "F_max": F_max,
            "v_safe": v_safe,
        }
    if v_safe is None and force_model is not None:
        try:
            v_top = max(force_model.v_range[1], float(traj.v_cmd.max()))
            v_safe = safe_velocity(force_model, (scene.material.E, scene.material.sigma_y), F_max, (force_model.v_range[0], v_top))
        except NoSafeVelocityError as exc:
            logging.error(f"No safe velocity for {scene.kind}: {exc}")
            record.status, record.diagnostics = "failed", {"error": str(exc)}
            return record
    if v_safe is not None:
        if trajectory is not None:
            record.source_trajectory = traj
        traj = clamp_trajectory(traj, v_safe)
        record.summary["v_safe"] = v_safe
    record.trajectory = traj

    logging.info(f"Episode start: {scene.kind} {task.style}/{task.state.label}, seed {config.seed}")
    try:
        particles = sample_object_particles(scene, config, jitter_rng)
        sim = CuttingSimulation(config, particles, traj, materials, cutting, contact)
        sim.run()
    except (NumericalDivergenceError, OutOfDomainError) as exc:
        diagnostics = {"error": str(exc), "type": type(exc).__name__}
        diagnostics.update(getattr(exc, "diagnostics", {}))
        if getattr(exc, "particle_index", None) is not None:
            diagnostics["particle_index"] = exc.particle_index
        logging.error(f"Episode failed: {diagnostics}")
        record.status, record.diagnostics = "failed", diagnostics
        return record

    record.force = _force_frame(sim.knife_force)
    record.board_force = _force_frame(sim.board_force)
    record.knife = pd.DataFrame(sim.knife_rows, columns=["t", "speed", "u", "c_hat", "phase"])
    record.jstats = pd.DataFrame(sim.j_rows, columns=["t", "Jmin", "Jmax", "clamps"])
    record.segments = pd.DataFrame(sim.segments.history, columns=["t", "segments"])

    achieved = sim.achieved_planes(axis)
    lo, hi = aabb
    first = traj.contact_runs()[0][0] if traj.contact_runs() else 0
    blade_axis = traj.rotation_matrices()[first][:, 2]
    target_axis = np.eye(3)[axis]
    record.verdict = evaluate_success(
        achieved, planes, float(hi[axis] - lo[axis]), blade_axis, target_axis, segments=record.final_segments
    )

    step_total = np.zeros(3)
    for impulse in sim.step_impulses:
        step_total = step_total + impulse
    record.summary.update(
        {
            "steps": sim.steps,
            "peak_force": record.peak_force,
            "final_segments": record.final_segments,
            "achieved_planes": achieved,
            "first_contact_step": sim.first_contact_step,
            "step_impulse_total": step_total.tolist(),
            "totals": totals(sim.particles),
        }
    )
    logging.info(
        f"Episode end: {sim.steps} steps, peak force {record.peak_force:.3f} N, "
        f"{record.final_segments} segments, success={record.verdict.success}"
    )
    return record


def replay(path, **overrides) -> tuple[EpisodeRecord, bool]:
    """Re-run a recorded episode from its snapshot and compare the force series.

    A clamped episode is re-clamped with its recorded safe speed; an episode
    run on a supplied trajectory reuses it.
    """
    original = EpisodeRecord.load(path)
    snap = original.snapshot
    scene = SceneSpec.from_dict(snap["scene"])
    task = CutTask.from_dict(snap["task"])
    config = SimConfig.from_dict(snap["sim"])
    cutting = CuttingParams.from_dict(snap["cutting"])
    contact = ContactParams(**snap["contact"])
    style = StyleParams.from_dict(snap["style"])
    kwargs = {}
    safety = snap.get("safety")
    if safety is not None:
        if safety["force_model"] is not None:
            kwargs["force_model"] = ForceModel.from_dict(safety["force_model"])
        kwargs["F_max"] = safety["F_max"]
        kwargs["v_safe"] = original.summary.get("v_safe", safety["v_safe"])
    if snap.get("trajectory_source") == "given":
        kwargs["trajectory"] = original.trajectory if original.source_trajectory is None else original.source_trajectory
    kwargs.update(overrides)
    rerun = run_episode(scene, task, config, cutting=cutting, contact=contact, style=style, instruction=original.instruction, **kwargs)
    columns = ["Fx", "Fy", "Fz", "Fmag"]
    identical = len(rerun.force) == len(original.force) and np.array_equal(
        rerun.force[columns].to_numpy(), original.force[columns].to_numpy()
    )
    return rerun, identical
