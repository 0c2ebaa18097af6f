# mpm_core.py
"""MLS-MPM time-stepping core.

Particles and grid nodes are stored as structure-of-arrays numpy buffers.
Grid nodes use the flat index ``(ix * n + iy) * n + iz`` and the domain is
the cube ``[0, n * dx]^3`` with its origin at zero.
"""

import logging
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property
from itertools import product

import numpy as np

from config import (
    BOUNDARY_CELLS,
    CFL_FACTOR,
    C_MIN,
    BAND0,
    BAND_GAMMA,
    DAMPING_GRID,
    DAMPING_PARTICLE,
    DEFAULT_DENSITY,
    DEFAULT_DT,
    DEFAULT_DT_ACC,
    DEFAULT_K2_REF,
    DEFAULT_POISSON,
    DEFAULT_SEED,
    DEFAULT_YIELD_STRESS,
    DEFAULT_YOUNGS,
    DOMAIN_SIZE,
    DX_REF,
    GRAVITY,
    GRID_RESOLUTION,
    GRID_SPEED_CAP_FACTOR,
    HARDENING_MODULUS,
    J_MAX,
    J_MIN,
    MAX_EPISODE_TIME,
    PARTICLE_MARGIN_CELLS,
    PERZYNA_RELAXATION,
    V_HAT,
)
from errors import (
    ConfigError,
    InternalInvariantError,
    InvertedElementError,
    NumericalDivergenceError,
    OutOfDomainError,
    ParameterDomainError,
)

STENCIL_OFFSETS = np.array(list(product(range(3), repeat=3)), dtype=np.int64)
_SQRT_2_3 = np.sqrt(2.0 / 3.0)


def compute_lame(E: float, nu: float) -> tuple[float, float]:
    """Return the Lamé parameters ``(mu, lambda)`` for Young's modulus and Poisson ratio."""
    if not E > 0:
        raise ParameterDomainError(f"Young's modulus must be positive, got {E}")
    if not -1.0 < nu < 0.5:
        raise ParameterDomainError(f"Poisson ratio must lie in (-1, 0.5), got {nu}")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


@dataclass(frozen=True)
class Material:
    rho: float = DEFAULT_DENSITY
    E: float = DEFAULT_YOUNGS
    nu: float = DEFAULT_POISSON
    sigma_y: float = DEFAULT_YIELD_STRESS
    k2_ref: float = DEFAULT_K2_REF
    name: str = "default"

    @property
    def lame(self) -> tuple[float, float]:
        return compute_lame(self.E, self.nu)

    @property
    def wave_speed(self) -> float:
        mu, lam = self.lame
        return float(np.sqrt((lam + 2.0 * mu) / self.rho))

    def to_dict(self) -> dict:
        data = asdict(self)
        # JSON has no infinity literal
        if not np.isfinite(self.sigma_y):
            data["sigma_y"] = "inf"
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Material":
        data = dict(data)
        if "sigma_y" in data:
            data["sigma_y"] = float(data["sigma_y"])
        return cls(**data)


@dataclass
class SimConfig:
    """Engine settings. ``dx`` is derived from ``domain_size / n_grid``."""

    n_grid: int = GRID_RESOLUTION
    domain_size: float = DOMAIN_SIZE
    dt: float = DEFAULT_DT
    dt_acc: float = DEFAULT_DT_ACC
    g: tuple[float, float, float] = GRAVITY
    damping_grid: float = DAMPING_GRID
    damping_particle: float = DAMPING_PARTICLE
    J_min: float = J_MIN
    J_max: float = J_MAX
    j_clamp_mode: str = "nearest"
    dx_ref: float = DX_REF
    gamma: float = BAND_GAMMA
    band0: float = BAND0
    v_hat: float = V_HAT
    c_min: float = C_MIN
    cfl_factor: float = CFL_FACTOR
    seed: int = DEFAULT_SEED
    reduction: str = "deterministic"
    grid_speed_cap: float | None = GRID_SPEED_CAP_FACTOR
    hardening: float = HARDENING_MODULUS
    perzyna_relaxation: float = PERZYNA_RELAXATION
    max_time: float = MAX_EPISODE_TIME

    @property
    def dx(self) -> float:
        return self.domain_size / self.n_grid

    @property
    def acc_steps(self) -> int:
        return int(round(self.dt_acc / self.dt))

    @property
    def deterministic(self) -> bool:
        return self.reduction == "deterministic"

    def to_dict(self) -> dict:
        data = asdict(self)
        data["g"] = list(self.g)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown sim config keys: {', '.join(unknown)}")
        data = dict(data)
        if "g" in data:
            data["g"] = tuple(float(c) for c in data["g"])
        return cls(**data)


@dataclass
class ParticleState:
    """Lagrangian samples; every field has the particle count as its leading axis."""

    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    m: np.ndarray
    V0: np.ndarray
    alpha: np.ndarray
    D: np.ndarray
    mat: np.ndarray
    seg: np.ndarray

    @classmethod
    def create(cls, x, m, V0, v=None, mat=None) -> "ParticleState":
        x = np.array(x, dtype=np.float64).reshape(-1, 3)
        n = len(x)
        m = np.broadcast_to(np.asarray(m, dtype=np.float64), (n,)).copy()
        V0 = np.broadcast_to(np.asarray(V0, dtype=np.float64), (n,)).copy()
        if np.any(m <= 0) or np.any(V0 <= 0):
            raise ParameterDomainError("Particle mass and volume must be positive")
        return cls(
            x=x,
            v=np.zeros((n, 3)) if v is None else np.array(v, dtype=np.float64).reshape(n, 3),
            F=np.tile(np.eye(3), (n, 1, 1)),
            C=np.zeros((n, 3, 3)),
            m=m,
            V0=V0,
            alpha=np.zeros(n),
            D=np.zeros(n),
            mat=np.zeros(n, dtype=np.int64) if mat is None else np.asarray(mat, dtype=np.int64).copy(),
            seg=np.zeros(n, dtype=np.int64),
        )

    @property
    def count(self) -> int:
        return len(self.x)

    def copy(self) -> "ParticleState":
        return ParticleState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})


@dataclass
class GridState:
    n: int
    dx: float
    mass: np.ndarray = field(repr=False)
    mom: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    v_before: np.ndarray = field(repr=False)
    v_after: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, n: int, dx: float) -> "GridState":
        size = n**3
        return cls(
            n=n,
            dx=dx,
            mass=np.zeros(size),
            mom=np.zeros((size, 3)),
            v=np.zeros((size, 3)),
            v_before=np.zeros((size, 3)),
            v_after=np.zeros((size, 3)),
        )

    def clear(self) -> None:
        self.mass[:] = 0.0
        self.mom[:] = 0.0
        self.v[:] = 0.0
        self.v_before[:] = 0.0
        self.v_after[:] = 0.0

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.mass > 0.0)

    def node_index(self, flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(flat, (self.n, self.n, self.n)), axis=-1)

    @cached_property
    def wall_masks(self) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
        """Per axis, the nodes inside the low and high wall bands."""
        idx = self.node_index(np.arange(self.n**3))
        return tuple((idx[:, a] < BOUNDARY_CELLS, idx[:, a] >= self.n - BOUNDARY_CELLS) for a in range(3))

    def node_positions(self, flat: np.ndarray) -> np.ndarray:
        return self.node_index(flat) * self.dx


@dataclass
class Stencil:
    """Quadratic B-spline stencil of every particle: 27 nodes each."""

    nodes: np.ndarray  # (27, N) flat node indices
    weights: np.ndarray  # (27, N)
    dpos: np.ndarray  # (27, N, 3) node position minus particle position


def bspline_weights(fx) -> np.ndarray:
    """Quadratic B-spline weights of the three stencil nodes.

    ``fx`` is the distance from the particle to the lowest stencil node in
    cell units and must lie in ``[0.5, 1.5]``. The result has a new leading
    axis of length 3.
    """
    fx = np.asarray(fx, dtype=np.float64)
    if np.any(fx < 0.5 - 1e-12) or np.any(fx > 1.5 + 1e-12):
        raise InternalInvariantError("particle outside its stencil (fx must lie in [0.5, 1.5])")
    return np.stack(
        [
            0.5 * (1.5 - fx) ** 2,
            0.75 - (fx - 1.0) ** 2,
            0.5 * (fx - 0.5) ** 2,
        ]
    )


def compute_stencil(x: np.ndarray, config: SimConfig) -> Stencil:
    n, dx = config.n_grid, config.dx
    X = x / dx
    outside = np.any((X < PARTICLE_MARGIN_CELLS) | (X > n - PARTICLE_MARGIN_CELLS), axis=1)
    if outside.any():
        index = int(np.flatnonzero(outside)[0])
        raise OutOfDomainError(
            f"particle {index} at {x[index].tolist()} left the domain interior",
            particle_index=index,
        )
    base = np.floor(X - 0.5).astype(np.int64)
    fx = X - base
    w = bspline_weights(fx)
    offsets = STENCIL_OFFSETS
    node = base[None, :, :] + offsets[:, None, :]
    nodes = (node[..., 0] * n + node[..., 1]) * n + node[..., 2]
    weights = w[offsets[:, 0], :, 0] * w[offsets[:, 1], :, 1] * w[offsets[:, 2], :, 2]
    dpos = (offsets[:, None, :] - fx[None, :, :]) * dx
    return Stencil(nodes=nodes, weights=weights, dpos=dpos)


def scatter_add(index: np.ndarray, values: np.ndarray, size: int, deterministic: bool = True) -> np.ndarray:
    """Sum ``values`` into ``size`` bins.

    Deterministic mode reduces with ``bincount`` in input order; fast mode
    uses unbuffered ``np.add.at``.
    """
    shape = index.shape
    index = index.ravel()
    if values.ndim == 1 or values.shape == shape:
        values = values.reshape(-1)
        if deterministic:
            return np.bincount(index, weights=values, minlength=size)
        out = np.zeros(size)
        np.add.at(out, index, values)
        return out
    values = values.reshape(len(index), -1)
    if deterministic:
        return np.stack(
            [np.bincount(index, weights=values[:, c], minlength=size) for c in range(values.shape[1])],
            axis=1,
        )
    out = np.zeros((size, values.shape[1]))
    np.add.at(out, index, values)
    return out


def polar_rotation(F) -> tuple[np.ndarray, np.ndarray]:
    """Polar decomposition ``F = R S`` for one matrix or a stack of them."""
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    if np.any(J <= 0.0):
        raise InvertedElementError("polar decomposition requires det(F) > 0")
    U, sig, Vh = np.linalg.svd(F)
    R = U @ Vh
    S = np.swapaxes(Vh, -1, -2) @ (sig[..., :, None] * Vh)
    return R, S


def corotated_piola(F, mu_eff, lambda_eff) -> np.ndarray:
    """First Piola-Kirchhoff stress of fixed corotated elasticity."""
    F = np.asarray(F, dtype=np.float64)
    R, _ = polar_rotation(F)
    J = np.linalg.det(F)
    mu = np.asarray(mu_eff, dtype=np.float64)[..., None, None]
    lam = np.asarray(lambda_eff, dtype=np.float64)
    F_inv_T = np.swapaxes(np.linalg.inv(F), -1, -2)
    volumetric = np.asarray(lam * (J - 1.0) * J)
    return 2.0 * mu * (F - R) + volumetric[..., None, None] * F_inv_T


def corotated_energy(F, mu, lam) -> np.ndarray:
    sig = np.linalg.svd(np.asarray(F, dtype=np.float64), compute_uv=False)
    J = np.linalg.det(F)
    return mu * np.sum((sig - 1.0) ** 2, axis=-1) + 0.5 * lam * (J - 1.0) ** 2


def cauchy_stress(F, P) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    J = np.linalg.det(F)
    return (P @ np.swapaxes(F, -1, -2)) / J[..., None, None]


def deviatoric_stress_norm(F, mu) -> np.ndarray:
    """Kirchhoff deviatoric stress magnitude ``2 mu |dev(log stretch)|``."""
    sig = np.linalg.svd(np.asarray(F, dtype=np.float64), compute_uv=False)
    eps = np.log(sig)
    dev = eps - eps.mean(axis=-1, keepdims=True)
    return 2.0 * np.asarray(mu) * np.linalg.norm(dev, axis=-1)


def _radial_return(F, mu, sigma_y, alpha, hardening=0.0, relaxation=0.0, dt=None):
    F_out = F.copy()
    alpha_out = alpha.copy()
    candidates = np.flatnonzero(np.isfinite(sigma_y))
    if candidates.size == 0:
        return F_out, alpha_out
    if np.any(np.linalg.det(F[candidates]) <= 0.0):
        raise InvertedElementError("J2 return requires det(F) > 0")
    U, sig, Vh = np.linalg.svd(F[candidates])
    eps = np.log(sig)
    dev = eps - eps.mean(axis=1, keepdims=True)
    dev_norm = np.linalg.norm(dev, axis=1)
    mu_c = mu[candidates]
    radius = _SQRT_2_3 * (sigma_y[candidates] + hardening * alpha[candidates])
    yielding = 2.0 * mu_c * dev_norm > radius
    if not yielding.any():
        return F_out, alpha_out
    dgamma = dev_norm[yielding] - radius[yielding] / (2.0 * mu_c[yielding])
    if relaxation > 0.0 and dt:
        # Perzyna overstress relaxation
        dgamma = dgamma * dt / (dt + relaxation)
    eps_new = eps[yielding] - (dgamma / dev_norm[yielding])[:, None] * dev[yielding]
    rows = candidates[yielding]
    F_out[rows] = U[yielding] @ (np.exp(eps_new)[:, :, None] * Vh[yielding])
    alpha_out[rows] = alpha[rows] + _SQRT_2_3 * dgamma
    return F_out, alpha_out


def j2_radial_return(F_trial, mat: Material, alpha, *, mu=None, hardening=0.0, relaxation=0.0, dt=None):
    """Project ``F_trial`` back onto the von Mises yield surface.

    The return is performed on the deviator of the Hencky strain of the
    principal stretches, so ``det(F)`` is preserved. Accepts one matrix or
    a stack; ``mu`` overrides the material shear modulus (damaged moduli).
    """
    F = np.asarray(F_trial, dtype=np.float64)
    single = F.ndim == 2
    F = F.reshape(-1, 3, 3)
    alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    n = len(F)
    mu_arr = np.broadcast_to(np.asarray(mat.lame[0] if mu is None else mu, dtype=np.float64), (n,))
    sigma_y = np.full(n, float(mat.sigma_y))
    F_out, alpha_out = _radial_return(F, mu_arr, sigma_y, np.broadcast_to(alpha, (n,)).copy(), hardening, relaxation, dt)
    if single:
        return F_out[0], float(alpha_out[0])
    return F_out, alpha_out


def material_table(materials) -> dict[str, np.ndarray]:
    lame = [m.lame for m in materials]
    return {
        "mu": np.array([l[0] for l in lame]),
        "lam": np.array([l[1] for l in lame]),
        "sigma_y": np.array([m.sigma_y for m in materials], dtype=np.float64),
        "rho": np.array([m.rho for m in materials]),
    }


def particle_moduli(particles: ParticleState, materials) -> tuple[np.ndarray, np.ndarray]:
    table = material_table(materials)
    return table["mu"][particles.mat], table["lam"][particles.mat]


def apply_plasticity(particles: ParticleState, materials, config: SimConfig, mu=None) -> int:
    """Run the J2 return on every particle in place; returns the yielding count."""
    table = material_table(materials)
    mu = table["mu"][particles.mat] if mu is None else mu
    sigma_y = table["sigma_y"][particles.mat]
    F, alpha = _radial_return(
        particles.F, mu, sigma_y, particles.alpha, config.hardening, config.perzyna_relaxation, config.dt
    )
    yielded = int(np.count_nonzero(alpha > particles.alpha))
    particles.F, particles.alpha = F, alpha
    return yielded


def p2g(particles: ParticleState, grid: GridState, config: SimConfig, moduli=None, stencil: Stencil | None = None) -> Stencil:
    """Scatter mass and APIC momentum to the grid.

    ``moduli`` is a ``(mu_eff, lambda_eff)`` pair of per-particle arrays
    (already damage-scaled); ``None`` disables the stress force.
    """
    st = compute_stencil(particles.x, config) if stencil is None else stencil
    inv_dx = 1.0 / config.dx
    m = particles.m
    affine = m[:, None, None] * particles.C
    if moduli is not None:
        mu_eff, lam_eff = moduli
        P = corotated_piola(particles.F, mu_eff, lam_eff)
        stress = P @ np.swapaxes(particles.F, -1, -2)
        affine = affine - (config.dt * 4.0 * inv_dx**2) * particles.V0[:, None, None] * stress
    mv = m[:, None] * particles.v
    mom = st.weights[..., None] * (mv[None, :, :] + np.einsum("nij,knj->kni", affine, st.dpos))
    mass = st.weights * m[None, :]
    size = grid.n**3
    grid.mass = scatter_add(st.nodes, mass, size, config.deterministic)
    grid.mom = scatter_add(st.nodes, mom.reshape(-1, 3), size, config.deterministic)
    return st


def grid_update(grid: GridState, config: SimConfig, dt: float | None = None) -> None:
    """Momentum to velocity, then gravity, damping, speed cap and wall conditions."""
    dt = config.dt if dt is None else dt
    active = grid.mass > 0.0
    v = np.zeros_like(grid.mom)
    v[active] = grid.mom[active] / grid.mass[active, None]
    v[active] += np.asarray(config.g) * dt
    v[active] *= 1.0 - config.damping_grid * dt
    if config.grid_speed_cap is not None and config.grid_speed_cap > 0.0:
        v_max = config.grid_speed_cap * config.dx / dt
        speed = np.linalg.norm(v, axis=1)
        fast = speed > v_max
        if fast.any():
            v[fast] *= (v_max / speed[fast])[:, None]
    for axis, (low_band, high_band) in enumerate(grid.wall_masks):
        low = low_band & (v[:, axis] < 0.0)
        high = high_band & (v[:, axis] > 0.0)
        v[low | high, axis] = 0.0
    grid.v = v
    grid.v_before = v.copy()
    grid.v_after = v.copy()


def interpolate(field_values: np.ndarray, stencil: Stencil) -> np.ndarray:
    return np.einsum("kn,kni->ni", stencil.weights, field_values[stencil.nodes])


def clamp_determinant(F: np.ndarray, J_min: float, J_max: float, mode: str = "nearest") -> tuple[np.ndarray, int]:
    """Isotropically rescale matrices whose determinant left ``[J_min, J_max]``.

    ``nearest`` rescales onto the violated bound; ``normalize`` resets the
    determinant to one.
    """
    J = np.linalg.det(F)
    out = (J < J_min) | (J > J_max)
    count = int(np.count_nonzero(out))
    if count == 0:
        return F, 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode == "nearest":
            scale = np.cbrt(np.clip(J[out], J_min, J_max) / J[out])
        elif mode == "normalize":
            scale = np.cbrt(1.0 / J[out])
        else:
            raise ConfigError(f"Unknown J clamp mode: {mode}")
    F = F.copy()
    F[out] *= scale[:, None, None]
    return F, count


def g2p(grid: GridState, particles: ParticleState, config: SimConfig, stencil: Stencil, extra_dv=None) -> dict:
    """Gather velocity and affine field, update F and advect particles in place.

    ``extra_dv`` holds per-particle velocity increments applied before
    advection (the tip separation force). Returns a step summary.
    """
    dt = config.dt
    v_nodes = grid.v[stencil.nodes]
    v_new = np.einsum("kn,kni->ni", stencil.weights, v_nodes)
    C_new = (4.0 / config.dx**2) * np.einsum("kn,kni,knj->nij", stencil.weights, v_nodes, stencil.dpos)
    v_new *= 1.0 - config.damping_particle * dt
    if extra_dv is not None:
        v_new = v_new + extra_dv
    F_new = (np.eye(3)[None] + dt * C_new) @ particles.F
    F_new, clamps = clamp_determinant(F_new, config.J_min, config.J_max, config.j_clamp_mode)
    x_new = particles.x + dt * v_new
    finite = np.isfinite(x_new).all(axis=1) & np.isfinite(v_new).all(axis=1) & np.isfinite(F_new).all(axis=(1, 2))
    if not finite.all():
        bad = np.flatnonzero(~finite)
        diagnostics = {
            "first_particle": int(bad[0]),
            "nan_particles": int(bad.size),
            "max_grid_speed": float(np.nanmax(np.linalg.norm(grid.v, axis=1))),
        }
        logging.error(f"Numerical divergence in G2P: {diagnostics}")
        raise NumericalDivergenceError("non-finite particle state after G2P", diagnostics)
    particles.v, particles.C, particles.F, particles.x = v_new, C_new, F_new, x_new
    J = np.linalg.det(F_new)
    return {"J_min": float(J.min()), "J_max": float(J.max()), "clamps": clamps}


def cfl_timestep(config: SimConfig, materials) -> float:
    """Largest stable explicit timestep for the stiffest material."""
    materials = list(materials)
    if not materials:
        raise ConfigError("CFL timestep needs at least one material")
    wave_speed = max(m.wave_speed for m in materials)
    return config.cfl_factor * config.dx / wave_speed


def check_timestep(config: SimConfig, materials) -> float:
    dt_max = cfl_timestep(config, materials)
    if dt_max <= 0.0:
        raise ConfigError("CFL timestep is zero; cfl_factor must be positive")
    if config.dt > dt_max:
        raise ConfigError(f"dt={config.dt:.3e} s exceeds the CFL limit {dt_max:.3e} s")
    return dt_max


def totals(particles: ParticleState) -> dict:
    return {
        "mass": float(particles.m.sum()),
        "momentum": (particles.m[:, None] * particles.v).sum(axis=0).tolist(),
    }
