import os
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import polar
from scipy.spatial.transform import Rotation

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from errors import ConfigError, InvertedElementError, OutOfDomainError, ParameterDomainError
from mpm_core import (
    GridState,
    Material,
    ParticleState,
    SimConfig,
    bspline_weights,
    cfl_timestep,
    check_timestep,
    clamp_determinant,
    compute_lame,
    compute_stencil,
    corotated_energy,
    corotated_piola,
    deviatoric_stress_norm,
    g2p,
    grid_update,
    j2_radial_return,
    p2g,
    polar_rotation,
    scatter_add,
    totals,
)


def _quiet_config(**overrides):
    base = dict(n_grid=16, domain_size=1.0, g=(0.0, 0.0, 0.0), damping_grid=0.0, damping_particle=0.0)
    base.update(overrides)
    return SimConfig(**base)


def _cloud(n, seed=0, lo=0.35, hi=0.65):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(n, 3))


def test_compute_lame_examples():
    assert compute_lame(1.0e6, 0.0) == (pytest.approx(5.0e5), pytest.approx(0.0))
    mu, lam = compute_lame(0.1e6, 0.3)
    assert mu == pytest.approx(38461.54, abs=0.01)
    assert lam == pytest.approx(57692.31, abs=0.01)
    mu, lam = compute_lame(0.9e6, 0.3)
    assert mu == pytest.approx(346153.85, abs=0.01)
    assert lam == pytest.approx(519230.77, abs=0.01)


def test_compute_lame_rejects_bad_parameters():
    with pytest.raises(ParameterDomainError):
        compute_lame(0.0, 0.3)
    with pytest.raises(ValueError):
        compute_lame(1e5, 0.5)


def test_bspline_weights_examples():
    assert bspline_weights(1.0) == pytest.approx([0.125, 0.75, 0.125])
    assert bspline_weights(0.5) == pytest.approx([0.5, 0.5, 0.0])


@given(st.floats(min_value=0.5, max_value=1.5))
def test_bspline_weights_partition_of_unity(fx):
    assert bspline_weights(fx).sum() == pytest.approx(1.0, abs=1e-12)


def test_polar_rotation_identity_and_pure_rotation():
    R, S = polar_rotation(np.eye(3))
    assert np.allclose(R, np.eye(3)) and np.allclose(S, np.eye(3))

    rot = Rotation.from_euler("z", 30.0, degrees=True).as_matrix()
    R, S = polar_rotation(rot)
    assert np.allclose(R, rot, atol=1e-12)
    assert np.allclose(S, np.eye(3), atol=1e-12)


def test_polar_rotation_matches_scipy_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        F = np.eye(3) + 0.2 * rng.standard_normal((3, 3))
        if np.linalg.det(F) <= 0.1:
            continue
        R, S = polar_rotation(F)
        R_ref, S_ref = polar(F)
        assert np.allclose(R, R_ref, atol=1e-8)
        assert np.allclose(S, S_ref, atol=1e-8)


def test_polar_rotation_rejects_inverted_matrix():
    with pytest.raises(InvertedElementError):
        polar_rotation(np.diag([1.0, 1.0, -1.0]))


def test_corotated_piola_rest_and_rotation_are_stress_free():
    assert np.allclose(corotated_piola(np.eye(3), 1e5, 1e5), 0.0)
    rot = Rotation.from_euler("xyz", [10.0, 20.0, 30.0], degrees=True).as_matrix()
    assert np.allclose(corotated_piola(rot, 1e5, 1e5), 0.0, atol=1e-8)


def test_corotated_piola_is_energy_gradient():
    mu, lam = 1e5, 1e5
    F = np.diag([1.01, 1.0, 1.0])
    P = corotated_piola(F, mu, lam)
    h = 1e-7
    grad = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            dF = np.zeros((3, 3))
            dF[i, j] = h
            grad[i, j] = (corotated_energy(F + dF, mu, lam) - corotated_energy(F - dF, mu, lam)) / (2 * h)
    assert np.allclose(P, grad, rtol=1e-4, atol=1e-4 * np.abs(P).max())


def _isochoric(e):
    return np.diag(np.exp([e, -0.5 * e, -0.5 * e]))


def test_j2_return_elastic_material_is_unchanged():
    F = _isochoric(0.3)
    F_out, alpha = j2_radial_return(F, Material(sigma_y=np.inf), 0.0)
    assert np.array_equal(F_out, F)
    assert alpha == 0.0


def test_j2_return_inside_yield_surface_is_unchanged():
    mat = Material(E=1e5, nu=0.3, sigma_y=1e3)
    mu = mat.lame[0]
    radius = np.sqrt(2.0 / 3.0) * mat.sigma_y
    e = 0.999 * radius / (2.0 * mu) / np.sqrt(1.5)
    F = _isochoric(e)
    F_out, alpha = j2_radial_return(F, mat, 0.2)
    assert np.array_equal(F_out, F)
    assert alpha == 0.2


def test_j2_return_projects_onto_yield_surface():
    mat = Material(E=1e5, nu=0.3, sigma_y=1e3)
    mu = mat.lame[0]
    radius = np.sqrt(2.0 / 3.0) * mat.sigma_y
    e = 2.0 * radius / (2.0 * mu) / np.sqrt(1.5)
    F_trial = _isochoric(e)
    assert deviatoric_stress_norm(F_trial, mu) == pytest.approx(2.0 * radius)
    F_out, alpha = j2_radial_return(F_trial, mat, 0.0)
    assert deviatoric_stress_norm(F_out, mu) == pytest.approx(radius, rel=1e-8)
    assert np.linalg.det(F_out) == pytest.approx(np.linalg.det(F_trial), rel=1e-12)
    assert alpha > 0.0


def test_p2g_single_particle_conserves_momentum():
    config = _quiet_config()
    particles = ParticleState.create([[0.5, 0.5, 0.5]], m=0.5, V0=1e-4, v=[[1.0, 0.0, 0.0]])
    grid = GridState.empty(config.n_grid, config.dx)
    p2g(particles, grid, config)
    assert grid.mass.sum() == pytest.approx(0.5, rel=1e-12)
    assert grid.mom.sum(axis=0) == pytest.approx([0.5, 0.0, 0.0], abs=1e-14)


def test_uniform_velocity_reaches_every_touched_node():
    config = _quiet_config()
    x = _cloud(200)
    particles = ParticleState.create(x, m=1e-3, V0=1e-6, v=np.tile([1.0, 0.0, 0.0], (200, 1)))
    grid = GridState.empty(config.n_grid, config.dx)
    p2g(particles, grid, config)
    grid_update(grid, config)
    active = grid.active
    assert np.allclose(grid.v[active], [1.0, 0.0, 0.0], atol=1e-10)


def test_affine_field_round_trip_is_exact():
    config = _quiet_config()
    A = np.array([[0.1, 0.2, 0.0], [-0.3, 0.05, 0.1], [0.0, 0.4, -0.2]])
    x = _cloud(50, seed=1)
    particles = ParticleState.create(x, m=1e-3, V0=1e-6, v=x @ A.T)
    particles.C = np.tile(A, (50, 1, 1))
    grid = GridState.empty(config.n_grid, config.dx)
    stencil = p2g(particles, grid, config)
    grid_update(grid, config)
    g2p(grid, particles, config, stencil)
    assert np.allclose(particles.v, x @ A.T, atol=1e-8)
    assert np.allclose(particles.C, A, atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=400), st.integers(min_value=0, max_value=2**16))
def test_p2g_conserves_mass(n, seed):
    config = _quiet_config()
    rng = np.random.default_rng(seed)
    particles = ParticleState.create(_cloud(n, seed), m=rng.uniform(1e-4, 1e-2, n), V0=1e-6)
    grid = GridState.empty(config.n_grid, config.dx)
    p2g(particles, grid, config)
    assert grid.mass.sum() == pytest.approx(particles.m.sum(), rel=1e-10)


def test_scatter_modes_agree():
    rng = np.random.default_rng(0)
    index = rng.integers(0, 50, size=1000)
    values = rng.standard_normal((1000, 3))
    exact = scatter_add(index, values, 50, deterministic=True)
    fast = scatter_add(index, values, 50, deterministic=False)
    assert np.allclose(exact, fast, atol=1e-12)


def test_compute_stencil_rejects_particle_near_wall():
    config = _quiet_config()
    with pytest.raises(OutOfDomainError) as info:
        compute_stencil(np.array([[0.5, 0.5, 0.5], [0.01, 0.5, 0.5]]), config)
    assert info.value.particle_index == 1


def test_grid_update_divides_momentum_by_mass():
    config = _quiet_config()
    grid = GridState.empty(config.n_grid, config.dx)
    node = (8 * 16 + 8) * 16 + 8
    grid.mass[node] = 2.0
    grid.mom[node] = [1.0, -3.0, 0.5]
    grid_update(grid, config)
    assert np.array_equal(grid.v[node], [0.5, -1.5, 0.25])


def test_grid_update_applies_gravity():
    config = _quiet_config(g=(0.0, -9.8, 0.0))
    grid = GridState.empty(config.n_grid, config.dx)
    node = (8 * 16 + 8) * 16 + 8
    grid.mass[node] = 1.0
    grid_update(grid, config, dt=1e-3)
    assert grid.v[node] == pytest.approx([0.0, -0.0098, 0.0])


def test_grid_update_zeroes_normal_velocity_at_wall():
    config = _quiet_config()
    grid = GridState.empty(config.n_grid, config.dx)
    node = (0 * 16 + 8) * 16 + 8
    grid.mass[node] = 1.0
    grid.mom[node] = [-1.0, 0.5, 0.0]
    grid_update(grid, config)
    assert np.array_equal(grid.v[node], [0.0, 0.5, 0.0])


def _one_particle_grid(config, velocity_fn):
    particles = ParticleState.create([[0.5, 0.5, 0.5]], m=1e-3, V0=1e-6)
    stencil = compute_stencil(particles.x, config)
    grid = GridState.empty(config.n_grid, config.dx)
    nodes = np.unique(stencil.nodes)
    grid.v[nodes] = velocity_fn(grid.node_positions(nodes))
    return grid, particles, stencil


def test_g2p_zero_field_keeps_deformation():
    config = _quiet_config()
    grid, particles, stencil = _one_particle_grid(config, np.zeros_like)
    particles.F[0] = np.diag([1.1, 0.95, 1.0])
    before = particles.F.copy()
    summary = g2p(grid, particles, config, stencil)
    assert np.allclose(particles.F, before, atol=1e-15)
    assert summary["clamps"] == 0


def test_g2p_updates_deformation_with_affine_field():
    config = _quiet_config()
    A = np.diag([0.01 / config.dt, 0.0, 0.0])
    grid, particles, stencil = _one_particle_grid(config, lambda pos: pos @ A.T)
    g2p(grid, particles, config, stencil)
    assert np.allclose(particles.F[0], np.diag([1.01, 1.0, 1.0]), atol=1e-10)


def test_clamp_determinant_examples():
    F = np.cbrt(4.0) * np.eye(3)[None]
    clamped, count = clamp_determinant(F, 0.4, 1.4)
    assert count == 1
    assert np.linalg.det(clamped[0]) == pytest.approx(1.4, abs=1e-10)

    normalized, _ = clamp_determinant(F, 0.4, 1.4, mode="normalize")
    assert np.linalg.det(normalized[0]) == pytest.approx(1.0, abs=1e-10)

    inside = np.eye(3)[None]
    same, count = clamp_determinant(inside, 0.4, 1.4)
    assert count == 0 and same is inside


def test_cfl_timestep_examples():
    config = SimConfig(n_grid=64, domain_size=1.0)
    soft = Material(E=0.1e6, nu=0.3, rho=1000.0)
    assert cfl_timestep(config, [soft]) == pytest.approx(2.69e-4, rel=2e-3)

    stiff = Material(E=0.4e6, nu=0.3, rho=1000.0)
    assert cfl_timestep(config, [stiff]) == pytest.approx(0.5 * cfl_timestep(config, [soft]), rel=1e-12)
    assert cfl_timestep(config, [soft, stiff]) == cfl_timestep(config, [stiff])


def test_check_timestep_rejects_degenerate_and_unstable_steps():
    with pytest.raises(ConfigError):
        check_timestep(SimConfig(cfl_factor=0.0), [Material()])
    with pytest.raises(ConfigError):
        check_timestep(SimConfig(dt=1e-3), [Material()])
    with pytest.raises(ConfigError):
        cfl_timestep(SimConfig(), [])
    assert check_timestep(SimConfig(), [Material(E=0.9e6)]) > SimConfig().dt


def test_sim_config_round_trip_and_unknown_keys():
    config = SimConfig(n_grid=32, seed=7)
    assert SimConfig.from_dict(config.to_dict()) == config
    assert config.acc_steps == 100
    with pytest.raises(ConfigError):
        SimConfig.from_dict({"n_grid": 32, "grid": 4})


def test_scatter_stencil_shaped_fields_keep_grid_shapes():
    rng = np.random.default_rng(3)
    index = rng.integers(0, 64, size=(27, 40))
    weights = rng.uniform(0.0, 1.0, size=(27, 40))
    vectors = rng.standard_normal((27 * 40, 3))
    for deterministic in (True, False):
        mass = scatter_add(index, weights, 64, deterministic)
        mom = scatter_add(index, vectors, 64, deterministic)
        assert mass.shape == (64,)
        assert mom.shape == (64, 3)
        assert mass.sum() == pytest.approx(weights.sum())


def test_p2g_then_grid_update_on_a_cloud():
    config = _quiet_config()
    particles = ParticleState.create(_cloud(30, seed=4), m=1e-3, V0=1e-6)
    grid = GridState.empty(config.n_grid, config.dx)
    p2g(particles, grid, config)
    assert grid.mass.shape == (config.n_grid**3,)
    assert grid.mom.shape == (config.n_grid**3, 3)
    grid_update(grid, config)
    assert grid.v.shape == (config.n_grid**3, 3)


def test_full_step_conserves_momentum_without_external_forces():
    config = _quiet_config(dt=1e-4)
    rng = np.random.default_rng(5)
    x = _cloud(120, seed=5)
    particles = ParticleState.create(x, m=rng.uniform(1e-4, 1e-3, 120), V0=1e-6, v=rng.standard_normal((120, 3)))
    particles.F = np.eye(3)[None] + 0.02 * rng.standard_normal((120, 3, 3))
    particles.C = 0.5 * rng.standard_normal((120, 3, 3))
    before = np.array(totals(particles)["momentum"])
    mu, lam = compute_lame(1e5, 0.3)
    grid = GridState.empty(config.n_grid, config.dx)
    stencil = p2g(particles, grid, config, moduli=(np.full(120, mu), np.full(120, lam)))
    assert grid.mom.sum(axis=0) == pytest.approx(before, abs=1e-12)
    grid_update(grid, config)
    g2p(grid, particles, config, stencil)
    after = np.array(totals(particles)["momentum"])
    assert after == pytest.approx(before, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**16))
def test_corotated_piola_commutes_with_rotation(seed):
    rng = np.random.default_rng(seed)
    F = np.eye(3) + 0.2 * rng.uniform(-1.0, 1.0, (3, 3))
    R = Rotation.from_rotvec(rng.normal(size=3)).as_matrix()
    P = corotated_piola(F, 1e5, 2e5)
    assert np.allclose(corotated_piola(R @ F, 1e5, 2e5), R @ P, rtol=0.0, atol=1e-8 * np.abs(P).max())


def test_wall_masks_are_built_once_per_grid():
    config = _quiet_config()
    grid = GridState.empty(config.n_grid, config.dx)
    masks = grid.wall_masks
    assert grid.wall_masks is masks
    low, high = masks[0]
    assert low.shape == (config.n_grid**3,)
    assert low[(0 * 16 + 8) * 16 + 8] and not low[(8 * 16 + 8) * 16 + 8]
    assert high[(15 * 16 + 8) * 16 + 8]
    grid.clear()
    assert grid.wall_masks is masks


def test_grid_speed_is_uncapped_by_default():
    config = _quiet_config(dt=1e-3)
    assert SimConfig().grid_speed_cap is None
    grid = GridState.empty(config.n_grid, config.dx)
    node = (8 * 16 + 8) * 16 + 8
    grid.mass[node] = 1e-3
    grid.mom[node] = [0.5, 0.0, 0.0]
    grid_update(grid, config)
    assert grid.v[node, 0] == 0.5 / 1e-3
    assert grid.v[node, 0] > 0.45 * config.dx / config.dt

    capped = _quiet_config(dt=1e-3, grid_speed_cap=0.45)
    grid_update(grid, capped)
    assert np.linalg.norm(grid.v[node]) == pytest.approx(0.45 * capped.dx / capped.dt)
