# cutting.py
"""Damage-gated cutting: blade-band damage, softening, knife resistance and segmentation."""

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from config import (
    C_NORM_SCALE,
    DAMAGE_CUT,
    DAMAGE_RATE,
    DOWNWARD_STROKE_MIN,
    EPS_SOFT,
    K2_EXPONENT_E,
    K2_EXPONENT_YIELD,
    LINK_RADIUS_CELLS,
    SEGMENT_EVERY_WINDOWS,
    SPEED_FLOOR,
    TIP_BAND_SCALE,
    TIP_FORCE,
)
from contact_sdf import SdfShape
from errors import ConfigError

_DOWN = np.array([0.0, -1.0, 0.0])


@dataclass(frozen=True)
class CutThresholds:
    band: float
    v_th: float
    c_norm: float
    damage_rate: float
    c_min: float = 0.0

    def __post_init__(self):
        for name in ("band", "v_th", "c_norm", "damage_rate"):
            if not getattr(self, name) > 0.0:
                raise ConfigError(f"Cut threshold {name} must be positive")
        if not 0.0 <= self.c_min <= 1.0:
            raise ConfigError("c_min must lie in [0, 1]")


@dataclass
class CuttingParams:
    """Cutting-model switches and constants that are not part of SimConfig."""

    damage_rate: float = DAMAGE_RATE
    damage_mode: str = "proportional"
    eps_soft: float = EPS_SOFT
    topology_update: bool = True
    k2_exponent_E: float = K2_EXPONENT_E
    k2_exponent_yield: float = K2_EXPONENT_YIELD
    speed_floor: float = SPEED_FLOOR
    tip_force: float = TIP_FORCE
    tip_band_scale: float = TIP_BAND_SCALE
    link_radius_cells: float = LINK_RADIUS_CELLS
    damage_cut: float = DAMAGE_CUT
    segment_every: int = SEGMENT_EVERY_WINDOWS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CuttingParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown cutting keys: {', '.join(unknown)}")
        return cls(**data)


def resolution_scaled_thresholds(config, damage_rate: float = DAMAGE_RATE) -> CutThresholds:
    """Blade band and speed thresholds that keep behavior stable across dx."""
    for name in ("dx", "dt", "dx_ref", "band0", "gamma", "v_hat"):
        if not getattr(config, name) > 0.0:
            raise ConfigError(f"{name} must be positive for threshold scaling")
    return CutThresholds(
        band=config.band0 * (config.dx_ref / config.dx) ** config.gamma,
        v_th=(config.dx / config.dt) * config.v_hat,
        c_norm=C_NORM_SCALE * config.dx / config.dt,
        damage_rate=damage_rate,
        c_min=config.c_min,
    )


def damage_gate(phi, c_hat: float, v_n, stroke_dir, thresholds: CutThresholds) -> np.ndarray:
    downward = float(np.dot(stroke_dir, _DOWN)) > DOWNWARD_STROKE_MIN
    return (
        (np.abs(phi) < thresholds.band)
        & (c_hat >= thresholds.c_min)
        & (np.asarray(v_n) <= -thresholds.v_th)
        & downward
    )


def damage_update(D, phi, c_hat: float, v_n, stroke_dir, thresholds: CutThresholds, dt: float, mode: str = "proportional"):
    """Grow damage where every gate holds; D never decreases and never exceeds 1."""
    D = np.asarray(D, dtype=np.float64)
    gate = damage_gate(phi, c_hat, v_n, stroke_dir, thresholds)
    if mode == "proportional":
        rate = thresholds.damage_rate * c_hat
    elif mode == "constant":
        rate = thresholds.damage_rate
    else:
        raise ConfigError(f"Unknown damage mode: {mode}")
    return np.where(gate, np.minimum(1.0, D + rate * dt), D)


def effective_moduli(mu, lam, D, eps_soft: float = EPS_SOFT):
    factor = np.maximum(1.0 - np.asarray(D, dtype=np.float64), eps_soft)
    return factor * mu, factor * lam


def speed_resistance(u: float, c_hat: float, k2: float, dt: float) -> float:
    return u / (1.0 + k2 * c_hat * u * dt)


def k2_scale(mat, ref, a: float = K2_EXPONENT_E, b: float = K2_EXPONENT_YIELD) -> float:
    """Resistance coefficient of ``mat`` relative to the reference material.

    A purely elastic material (infinite yield stress) is rated by stiffness
    only.
    """
    if not (ref.E > 0 and ref.sigma_y > 0 and np.isfinite(ref.sigma_y)):
        raise ConfigError("Reference material needs positive E and finite positive sigma_y")
    if not (mat.E > 0 and mat.sigma_y > 0):
        raise ConfigError(f"Material {mat.name} needs positive E and sigma_y")
    sigma_y = mat.sigma_y if np.isfinite(mat.sigma_y) else ref.sigma_y
    return mat.k2_ref * (mat.E / ref.E) ** a * (sigma_y / ref.sigma_y) ** b


def edge_distance(blade: SdfShape, x) -> np.ndarray:
    """Distance from points to the blade's cutting-edge segment."""
    local = blade.to_local(np.atleast_2d(x))
    along = np.maximum(np.abs(local[:, 0]) - 0.5 * blade.params["length"], 0.0)
    return np.sqrt(along**2 + local[:, 1] ** 2 + local[:, 2] ** 2)


def tip_force(x, m, blade: SdfShape, magnitude: float, dt: float, band: float) -> np.ndarray:
    """Lateral velocity kicks pushing material away from the blade mid-plane."""
    x = np.atleast_2d(x)
    dv = np.zeros_like(x)
    if magnitude <= 0.0:
        return dv
    near = edge_distance(blade, x) < band
    if not near.any():
        return dv
    side = np.sign(blade.to_local(x[near])[:, 2])
    lateral = blade.rotation[:, 2]
    dv[near] = (side * magnitude * dt / np.asarray(m)[near])[:, None] * lateral[None, :]
    return dv


def segment_connectivity(particles, link_radius: float, damage_cut: float, previous=None):
    """Connected components of undamaged particles within ``link_radius``.

    Particles with ``D >= damage_cut`` are labelled -1. Labels are ordered
    by the smallest particle index of each segment. When ``previous`` labels
    are given, links between particles that were already in different
    segments are dropped so segments never merge again.
    """
    if not link_radius > 0.0:
        raise ConfigError("link_radius must be positive")
    if not 0.0 < damage_cut <= 1.0:
        raise ConfigError("damage_cut must lie in (0, 1]")
    n = len(particles.x)
    labels = np.full(n, -1, dtype=np.int64)
    keep = np.flatnonzero(particles.D < damage_cut)
    if keep.size == 0:
        return 0, labels
    pairs = cKDTree(particles.x[keep]).query_pairs(link_radius, output_type="ndarray")
    if previous is not None and len(pairs):
        prev = np.asarray(previous)[keep]
        a, b = prev[pairs[:, 0]], prev[pairs[:, 1]]
        pairs = pairs[(a == b) | (a < 0) | (b < 0)]
    k = keep.size
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(k, k)) if len(pairs) else coo_matrix((k, k))
    count, comp = connected_components(graph, directed=False)
    first = np.full(count, k, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(k))
    rank = np.empty(count, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(count)
    labels[keep] = rank[comp]
    return int(count), labels


class SegmentTracker:
    """Runs segmentation on a cadence and keeps cuts permanent."""

    def __init__(self, link_radius: float, damage_cut: float):
        self.link_radius = link_radius
        self.damage_cut = damage_cut
        self.labels = None
        self.history: list[tuple[float, int]] = []

    def update(self, particles, t: float) -> int:
        count, labels = segment_connectivity(particles, self.link_radius, self.damage_cut, self.labels)
        if self.history and count != self.history[-1][1]:
            logging.info(f"t={t:.4f}s segment count {self.history[-1][1]} -> {count}")
        self.labels = labels
        particles.seg = labels
        self.history.append((t, count))
        return count


@dataclass
class KnifeTool:
    """Kinematically driven blade with the normalized-speed resistance state."""

    shape: SdfShape
    s0: float = 0.0
    u: float = 1.0
    k2: float = 0.0
    v_tool: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stroke_dir: np.ndarray = field(default_factory=lambda: np.array([0.0, -1.0, 0.0]))
    prev_shape: SdfShape | None = None
    dt: float = 1.0

    @property
    def pose(self) -> tuple[np.ndarray, np.ndarray]:
        return self.shape.rotation, self.shape.translation

    @property
    def speed(self) -> float:
        """Commanded speed magnitude ``u * s0``."""
        return self.u * self.s0

    @property
    def lateral_axis(self) -> np.ndarray:
        return self.shape.rotation[:, 2]

    def move_to(self, rotation, translation, dt: float) -> None:
        self.prev_shape = self.shape
        self.shape = self.shape.with_pose(rotation, translation)
        self.dt = dt
        delta = self.shape.translation - self.prev_shape.translation
        self.v_tool = delta / dt
        norm = np.linalg.norm(delta)
        if norm > 0.0:
            self.stroke_dir = delta / norm

    def velocity_at(self, x) -> np.ndarray:
        """Rigid-body velocity of the blade material currently at ``x``."""
        x = np.atleast_2d(x)
        if self.prev_shape is None:
            return np.zeros_like(x)
        previous = self.prev_shape.to_world(self.shape.to_local(x))
        return (x - previous) / self.dt

    def resist(self, c_hat: float, dt: float, floor: float = SPEED_FLOOR) -> float:
        self.u = max(min(self.u, floor), speed_resistance(self.u, c_hat, self.k2, dt))
        return self.u
