import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from errors import DegenerateObjectError
from mpm_core import SimConfig, totals
from safety import ForceModel
from simulation import CuttingSimulation, EpisodeRecord, plan_episode, replay, run_episode, sample_object_particles
from trajectory_planner import CutState, CutTask, SceneSpec, StyleParams

# coarse grid and a fast, shallow stroke keep an episode to a few hundred steps
SMALL = SimConfig(n_grid=32, dt=1e-4, dt_acc=1e-3, max_time=0.2)
QUICK_TASK = CutTask("Normal", CutState.middle(), h=0.005, v=1.0)


@pytest.fixture(scope="module")
def small_episode():
    return run_episode(SceneSpec(), QUICK_TASK, SMALL)


def test_object_particles_fill_the_primitive():
    config = SimConfig()
    particles = sample_object_particles(SceneSpec(), config)
    spacing = config.dx / 2
    assert particles.count > 100
    assert np.allclose(particles.V0, spacing**3)
    assert np.allclose(particles.m, 1000.0 * spacing**3)
    assert np.all(particles.x[:, 1] > 0.05)
    assert np.all(particles.D == 0.0)


def test_object_particles_are_seeded():
    config = SimConfig()
    a = sample_object_particles(SceneSpec(seed=4), config)
    b = sample_object_particles(SceneSpec(seed=4), config)
    c = sample_object_particles(SceneSpec(seed=5), config)
    assert np.array_equal(a.x, b.x)
    assert not np.array_equal(a.x, c.x)


def test_tiny_objects_are_degenerate():
    with pytest.raises(DegenerateObjectError):
        sample_object_particles(SceneSpec(scale=1e-3), SimConfig())


def test_plan_episode_targets_the_middle():
    aabb, axis, planes, traj = plan_episode(SceneSpec(), QUICK_TASK)
    lo, hi = aabb
    assert planes == [pytest.approx(0.5 * (lo[axis] + hi[axis]))]
    assert len(traj.contact_runs()) == 1


def test_steps_conserve_mass():
    scene = SceneSpec()
    particles = sample_object_particles(scene, SMALL)
    _, _, _, traj = plan_episode(scene, QUICK_TASK)
    sim = CuttingSimulation(SMALL, particles, traj, [scene.material])
    mass = totals(particles)["mass"]
    for _ in range(5):
        summary = sim.step()
    assert sim.steps == 5 and len(sim.knife_rows) == 5
    assert totals(sim.particles)["mass"] == pytest.approx(mass, rel=1e-12)
    assert summary["phase"] == "approach"


def test_small_episode_records_every_series(small_episode):
    record = small_episode
    assert record.ok, record.diagnostics
    steps = record.summary["steps"]
    assert len(record.knife) == steps
    assert len(record.force) == math.ceil(steps / SMALL.acc_steps)
    assert len(record.board_force) == len(record.force)
    assert len(record.segments) >= 1
    assert record.summary["first_contact_step"] is not None
    assert "contact" in set(record.knife["phase"])
    assert record.instruction is not None and "banana" in record.instruction


def test_small_episode_knife_never_speeds_up_in_contact(small_episode):
    u = small_episode.knife["u"].to_numpy()
    contact = (small_episode.knife["phase"] == "contact").to_numpy()
    assert np.all((u > 0.0) & (u <= 1.0))
    both = contact[1:] & contact[:-1]
    assert np.all(np.diff(u)[both] <= 0.0)


def test_small_episode_momentum_audit(small_episode):
    audit = small_episode.momentum_audit()
    assert audit["exact"]
    assert audit["passed"], audit


def test_record_save_and_load(small_episode, tmp_path):
    path = small_episode.save(tmp_path / "episode")
    loaded = EpisodeRecord.load(path)
    assert loaded.status == "ok"
    assert loaded.instruction == small_episode.instruction
    assert np.array_equal(loaded.force.to_numpy(), small_episode.force.to_numpy())
    assert loaded.trajectory.same_path(small_episode.trajectory)
    assert loaded.verdict == small_episode.verdict
    assert loaded.momentum_audit()["passed"]
    assert not any(p.name.startswith(".") for p in tmp_path.iterdir())


def test_empty_record_audit_passes():
    assert EpisodeRecord("failed", 0, {}).momentum_audit()["passed"]


def test_infeasible_force_limit_fails_the_episode():
    model = ForceModel(coefficients=[500.0, 0.0, 0.0, 0.0], kind="linear", v_range=(0.0, 1.0))
    record = run_episode(SceneSpec(), QUICK_TASK, SMALL, force_model=model, F_max=100.0)
    assert record.status == "failed"
    assert "exceeds" in record.diagnostics["error"]
    assert record.momentum_audit()["passed"]


def test_clamped_episode_stores_the_safe_velocity():
    model = ForceModel(coefficients=[0.0, 0.0, 100.0, 0.0, 0.0, 0.0], kind="quadratic", v_range=(0.0, 1.0))
    record = run_episode(SceneSpec(), QUICK_TASK, SMALL, force_model=model, F_max=25.0)
    assert record.summary["v_safe"] == pytest.approx(0.5, abs=1e-5)
    assert record.trajectory.v_cmd.max() <= record.summary["v_safe"] + 1e-9


@pytest.mark.slow
def test_replay_reproduces_forces(small_episode, tmp_path):
    path = small_episode.save(tmp_path / "episode")
    rerun, identical = replay(path)
    assert rerun.ok
    assert identical


@pytest.mark.slow
def test_desk_scale_normal_cut():
    record = run_episode(SceneSpec(), CutTask("Normal", CutState.middle()), SimConfig())
    assert record.ok, record.diagnostics
    assert record.peak_force > 0.0
    assert record.momentum_audit()["passed"]
    assert record.final_segments == 2
    assert record.verdict.success, record.verdict


SHORT = SimConfig(n_grid=32, dt=1e-4, dt_acc=1e-3, max_time=0.03)


def test_same_seed_gives_bit_identical_particle_states():
    scene = SceneSpec()
    _, _, _, traj = plan_episode(scene, QUICK_TASK)
    sims = [CuttingSimulation(SHORT, sample_object_particles(scene, SHORT), traj, [scene.material]) for _ in range(2)]
    for _ in range(20):
        for sim in sims:
            sim.step()
        a, b = (sim.particles for sim in sims)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.v, b.v)
        assert np.array_equal(a.F, b.F) and np.array_equal(a.D, b.D)


def test_same_seed_gives_bit_identical_records():
    first = run_episode(SceneSpec(), QUICK_TASK, SHORT)
    second = run_episode(SceneSpec(), QUICK_TASK, SHORT)
    assert first.ok and second.ok
    for name in ("force", "board_force", "knife", "jstats", "segments"):
        assert getattr(first, name).equals(getattr(second, name)), name
    assert first.trajectory.same_path(second.trajectory)
    assert first.verdict == second.verdict
    assert first.summary == second.summary


@pytest.mark.slow
def test_replay_reapplies_the_safety_clamp(tmp_path):
    model = ForceModel(coefficients=[0.0, 0.0, 100.0, 0.0, 0.0, 0.0], kind="quadratic", v_range=(0.0, 1.0))
    record = run_episode(SceneSpec(), QUICK_TASK, SHORT, force_model=model, F_max=25.0)
    path = record.save(tmp_path / "clamped")
    assert EpisodeRecord.load(path).snapshot["safety"]["F_max"] == 25.0
    rerun, identical = replay(path)
    assert identical
    assert rerun.summary["v_safe"] == record.summary["v_safe"]
    assert rerun.trajectory.same_path(record.trajectory)


@pytest.mark.slow
def test_replay_reuses_a_supplied_trajectory(tmp_path):
    scene = SceneSpec()
    _, _, _, planned = plan_episode(scene, QUICK_TASK, StyleParams(blade_length=0.1))
    record = run_episode(scene, QUICK_TASK, SHORT, trajectory=planned, v_safe=0.5)
    path = record.save(tmp_path / "given")
    loaded = EpisodeRecord.load(path)
    assert loaded.source_trajectory.same_path(planned)
    assert loaded.trajectory.params.blade_length == 0.1
    rerun, identical = replay(path)
    assert identical
    assert rerun.trajectory.same_path(record.trajectory)
