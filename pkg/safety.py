# safety.py
"""Force-prediction safety layer: sample collection, regression fit,
safe-velocity solve and trajectory clamping."""

import json
import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np
import pandas as pd
from scipy.linalg import lstsq
from scipy.optimize import bisect

from config import DEFAULT_FORCE_MODEL, F_MAX, FORCE_MODEL_KINDS, SAFE_VELOCITY_TOL
from errors import ConfigError, FitError, InternalInvariantError, NoSafeVelocityError

FEATURES = {
    "linear": ("1", "v", "E", "sigma_y"),
    "quadratic": ("1", "v", "v^2", "E", "sigma_y", "v*E"),
}


@dataclass(frozen=True)
class SafetySample:
    v: float
    E: float
    sigma_y: float
    F: float

    def __post_init__(self):
        if self.v < 0.0 or self.F < 0.0:
            raise ConfigError(f"Safety samples need v >= 0 and F >= 0, got v={self.v}, F={self.F}")

    @property
    def m_feat(self) -> tuple[float, float]:
        return self.E, self.sigma_y


def design_matrix(v, E, sigma_y, kind: str = DEFAULT_FORCE_MODEL) -> np.ndarray:
    v, E, sigma_y = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (v, E, sigma_y)))
    ones = np.ones_like(v)
    if kind == "linear":
        return np.stack([ones, v, E, sigma_y], axis=-1)
    if kind == "quadratic":
        return np.stack([ones, v, v**2, E, sigma_y, v * E], axis=-1)
    raise ConfigError(f"Unknown force model kind: {kind}")


@dataclass
class ForceModel:
    """Peak-force surface F̂(v, E, sigma_y) with its fit diagnostics."""

    coefficients: np.ndarray
    kind: str = DEFAULT_FORCE_MODEL
    residual_norm: float = 0.0
    residual_band: float = 0.0
    n_samples: int = 0
    v_range: tuple[float, float] = (0.0, 1.0)
    training_E: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in FORCE_MODEL_KINDS:
            raise ConfigError(f"Unknown force model kind: {self.kind}")
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64)
        if self.coefficients.shape != (len(FEATURES[self.kind]),):
            raise ConfigError(f"A {self.kind} model needs {len(FEATURES[self.kind])} coefficients")

    def predict(self, v, m_feat) -> np.ndarray:
        E, sigma_y = m_feat
        return design_matrix(v, E, sigma_y, self.kind) @ self.coefficients

    def dF_dv(self, v, E) -> np.ndarray:
        c = self.coefficients
        if self.kind == "linear":
            return np.broadcast_to(c[1], np.shape(v)).astype(np.float64)
        return c[1] + 2.0 * c[2] * np.asarray(v, dtype=np.float64) + c[5] * E

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "features": list(FEATURES[self.kind]),
            "coefficients": self.coefficients.tolist(),
            "residual_norm": self.residual_norm,
            "residual_band": self.residual_band,
            "n_samples": self.n_samples,
            "v_range": list(self.v_range),
            "training_E": list(self.training_E),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ForceModel":
        return cls(
            coefficients=np.asarray(data["coefficients"], dtype=np.float64),
            kind=data["kind"],
            residual_norm=float(data.get("residual_norm", 0.0)),
            residual_band=float(data.get("residual_band", 0.0)),
            n_samples=int(data.get("n_samples", 0)),
            v_range=tuple(data.get("v_range", (0.0, 1.0))),
            training_E=tuple(data.get("training_E", ())),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "ForceModel":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def collect_samples(velocities, materials, run_pairs) -> tuple[list[SafetySample], list[str]]:
    """Run one episode per (velocity, material) pair and keep the peak force.

    ``run_pairs(pairs)`` runs the whole list of ``(v, material)`` pairs and
    returns, in order, objects with ``status`` and ``peak_force``. Failed
    episodes are excluded and reported in the returned warnings list.
    """
    velocities, materials = list(velocities), list(materials)
    if not velocities:
        raise ConfigError("Velocity grid must not be empty")
    if not materials:
        raise ConfigError("Material grid must not be empty")
    pairs = list(product(velocities, materials))
    results = list(run_pairs(pairs))
    if len(results) != len(pairs):
        raise InternalInvariantError(f"expected {len(pairs)} sample runs, got {len(results)}")

    samples, warnings = [], []
    for (v, mat), result in zip(pairs, results):
        if result.status != "ok":
            message = f"Excluded safety sample v={v:g} m/s, E={mat.E:g} Pa: episode {result.status}"
            logging.warning(message)
            warnings.append(message)
            continue
        samples.append(SafetySample(v=float(v), E=mat.E, sigma_y=mat.sigma_y, F=float(result.peak_force)))
    logging.info(f"Collected {len(samples)} safety samples ({len(warnings)} excluded)")
    return samples, warnings


def samples_to_frame(samples) -> pd.DataFrame:
    return pd.DataFrame([{"v": s.v, "E": s.E, "sigma_y": s.sigma_y, "F": s.F} for s in samples], columns=["v", "E", "sigma_y", "F"])


def samples_from_frame(frame: pd.DataFrame) -> list[SafetySample]:
    return [SafetySample(float(r.v), float(r.E), float(r.sigma_y), float(r.F)) for r in frame.itertuples(index=False)]


def _degenerate_feature(scaled: np.ndarray, names) -> str | None:
    for j in range(scaled.shape[1]):
        if np.linalg.matrix_rank(scaled[:, : j + 1]) < j + 1:
            return names[j]
    return None


def fit_model(samples, kind: str = DEFAULT_FORCE_MODEL) -> ForceModel:
    """Least-squares fit of the peak-force surface, rejecting non-monotone fits."""
    if kind not in FORCE_MODEL_KINDS:
        raise ConfigError(f"Unknown force model kind: {kind}")
    samples = list(samples)
    names = FEATURES[kind]
    if len(samples) < len(names):
        raise FitError(
            f"A {kind} model needs at least {len(names)} samples, got {len(samples)}",
            {"n_samples": len(samples)},
        )
    v = np.array([s.v for s in samples])
    E = np.array([s.E for s in samples])
    sigma_y = np.array([s.sigma_y for s in samples])
    F = np.array([s.F for s in samples])

    A = design_matrix(v, E, sigma_y, kind)
    scale = np.max(np.abs(A), axis=0)
    scale[scale == 0.0] = 1.0
    scaled = A / scale
    degenerate = _degenerate_feature(scaled, names)
    if degenerate is not None:
        raise FitError(f"Design matrix is rank deficient at feature '{degenerate}'", {"feature": degenerate})
    solution, _, _, _ = lstsq(scaled, F)
    coefficients = solution / scale

    residuals = A @ coefficients - F
    peak = max(float(np.max(np.abs(F))), np.finfo(float).tiny)
    model = ForceModel(
        coefficients=coefficients,
        kind=kind,
        residual_norm=float(np.linalg.norm(residuals)),
        residual_band=float(np.max(np.abs(residuals)) / peak),
        n_samples=len(samples),
        v_range=(float(v.min()), float(v.max())),
        training_E=tuple(sorted(set(E.tolist()))),
    )
    # dF/dv is affine in v, so the endpoints bound it on the whole range
    slopes = np.array([model.dF_dv(np.array(model.v_range), e) for e in model.training_E]).ravel()
    if np.any(slopes < -1e-9 * peak):
        raise FitError(
            "Fitted force model decreases with velocity on the sampled range",
            {"min_slope": float(slopes.min()), "coefficients": coefficients.tolist()},
        )
    logging.info(f"Fitted {kind} force model on {len(samples)} samples, residual band {model.residual_band:.3%}")
    return model


def safe_velocity(model: ForceModel, m_feat, F_max: float = F_MAX, v_range=None, tol: float = SAFE_VELOCITY_TOL) -> float:
    """Largest velocity in ``v_range`` whose predicted peak force stays within ``F_max``."""
    if not F_max > 0.0:
        raise ConfigError(f"F_max must be positive, got {F_max}")
    v_min, v_max = model.v_range if v_range is None else v_range
    if not v_min < v_max:
        raise ConfigError(f"Velocity range must be increasing, got ({v_min}, {v_max})")
    E = m_feat[0]
    if np.any(model.dF_dv(np.array([v_min, v_max]), E) < 0.0):
        raise FitError("Force model is not monotone in velocity on the requested range", {"v_range": [v_min, v_max]})

    def excess(v):
        return float(model.predict(v, m_feat)) - F_max

    if excess(v_min) > 0.0:
        raise NoSafeVelocityError(f"Predicted force {excess(v_min) + F_max:.2f} N exceeds {F_max:g} N already at v={v_min:g} m/s")
    if excess(v_max) <= 0.0:
        return float(v_max)
    v_safe = bisect(excess, v_min, v_max, xtol=tol)
    while excess(v_safe) > 0.0 and v_safe > v_min:
        v_safe = max(v_min, v_safe - tol)
    return float(v_safe)


def clamp_trajectory(traj, v_safe: float):
    """Slow every segment faster than ``v_safe`` by stretching its duration."""
    if not v_safe > 0.0:
        raise ConfigError(f"v_safe must be positive, got {v_safe}")
    out = traj.copy()
    if not np.isfinite(v_safe) or len(traj) < 2:
        return out
    lengths = np.linalg.norm(np.diff(traj.position, axis=0), axis=1)
    durations = np.diff(traj.t)
    speeds = lengths / durations
    too_fast = speeds > v_safe
    if not too_fast.any():
        return out
    durations = np.where(too_fast, lengths / v_safe, durations)
    out.t = traj.t[0] + np.concatenate([[0.0], np.cumsum(durations)])
    seg_speed = np.minimum(lengths / durations, v_safe)
    out.v_cmd = np.append(seg_speed, seg_speed[-1])
    out._slerp = None
    logging.info(f"Clamped {int(too_fast.sum())} trajectory segments to {v_safe:.3f} m/s")
    return out
