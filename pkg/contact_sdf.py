# contact_sdf.py
"""Analytic signed distance fields, grid-node contact and force accounting."""

from collections import deque
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from config import (
    CONTACT_THRESHOLD_CELLS,
    C_NORM_SCALE,
    DX_REF,
    FRICTION_MU,
    KNIFE_EDGE_HALF_ANGLE,
    KNIFE_HEIGHT,
    KNIFE_LENGTH,
    KNIFE_SPINE_ARC_SEGMENTS,
    KNIFE_SPINE_THICKNESS,
    QUERY_AABB_PAD_CELLS,
    RESTITUTION,
)
from errors import ConfigError, InternalInvariantError, ParameterDomainError

SHAPE_KINDS = ("halfspace", "box", "wedge-blade", "sphere", "capsule", "ellipsoid")
_FD_STEP = 1e-7


@dataclass
class SdfShape:
    """An analytic SDF placed in the world by a rigid transform.

    ``rotation`` maps local to world coordinates; world = R @ local + t.
    """

    kind: str
    params: dict
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"Unknown SDF kind: {self.kind}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.kind == "wedge-blade" and "profile" not in self.params:
            self.params = dict(self.params, profile=_wedge_profile(self.params))

    def with_pose(self, rotation, translation) -> "SdfShape":
        return SdfShape(self.kind, self.params, rotation, translation)

    def to_local(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.translation) @ self.rotation

    def to_world(self, p: np.ndarray) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.translation

    def distance(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return _LOCAL_SDF[self.kind](self.to_local(x), self.params)

    def sample(self, x):
        """Signed distance and outward unit normal at world points ``x``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        pts = np.atleast_2d(x)
        local = self.to_local(pts)
        phi, n_local = _LOCAL_NORMAL[self.kind](local, self.params)
        n = n_local @ self.rotation.T
        if single:
            return float(phi[0]), n[0]
        return phi, n

    def local_bounds(self) -> tuple[np.ndarray, np.ndarray] | None:
        p = self.params
        if self.kind == "halfspace":
            return None
        if self.kind == "box":
            h = np.asarray(p["half_extents"], dtype=np.float64)
            return -h, h
        if self.kind == "wedge-blade":
            half_t = 0.5 * p["spine_thickness"]
            return (
                np.array([-0.5 * p["length"], 0.0, -half_t]),
                np.array([0.5 * p["length"], p["height"], half_t]),
            )
        if self.kind == "sphere":
            r = p["radius"]
            return np.full(3, -r), np.full(3, r)
        if self.kind == "capsule":
            r, hl = p["radius"], p["half_length"]
            return np.array([-hl - r, -r, -r]), np.array([hl + r, r, r])
        semi = np.asarray(p["semi_axes"], dtype=np.float64)
        return -semi, semi

    def aabb(self) -> tuple[np.ndarray, np.ndarray] | None:
        """World-space bounding box of the shape (``None`` when unbounded)."""
        bounds = self.local_bounds()
        if bounds is None:
            return None
        R, t = self.rotation, self.translation
        if self.kind == "sphere":
            r = self.params["radius"]
            return t - r, t + r
        if self.kind == "capsule":
            axis = R[:, 0] * self.params["half_length"]
            r = self.params["radius"]
            return t - np.abs(axis) - r, t + np.abs(axis) + r
        if self.kind in ("box", "ellipsoid"):
            half = bounds[1]
            # exact for boxes: sum |R_ij| h_j; exact for ellipsoids: sqrt(sum (R_ij s_j)^2)
            extent = np.abs(R) @ half if self.kind == "box" else np.sqrt((R**2) @ half**2)
            return t - extent, t + extent
        lo, hi = bounds
        corners = np.array(list(product(*zip(lo, hi))))
        world = self.to_world(corners)
        return world.min(axis=0), world.max(axis=0)


def halfspace(normal=(0.0, 1.0, 0.0), offset: float = 0.0) -> SdfShape:
    normal = np.asarray(normal, dtype=np.float64)
    return SdfShape("halfspace", {"normal": normal / np.linalg.norm(normal), "offset": float(offset)})


def box(half_extents, rotation=None, translation=None) -> SdfShape:
    h = np.asarray(half_extents, dtype=np.float64)
    if np.any(h <= 0):
        raise ParameterDomainError("Box half extents must be positive")
    return SdfShape("box", {"half_extents": h}, _rot(rotation), _vec(translation))


def wedge_blade(
    length: float = KNIFE_LENGTH,
    height: float = KNIFE_HEIGHT,
    spine_thickness: float = KNIFE_SPINE_THICKNESS,
    half_angle: float = KNIFE_EDGE_HALF_ANGLE,
    rotation=None,
    translation=None,
) -> SdfShape:
    """Knife blade: edge along local x at y = 0, spine at y = height, lateral axis z."""
    params = {"length": length, "height": height, "spine_thickness": spine_thickness, "half_angle": half_angle}
    return SdfShape("wedge-blade", params, _rot(rotation), _vec(translation))


def sphere(radius: float, translation=None) -> SdfShape:
    return SdfShape("sphere", {"radius": float(radius)}, np.eye(3), _vec(translation))


def capsule(radius: float, half_length: float, rotation=None, translation=None) -> SdfShape:
    return SdfShape("capsule", {"radius": float(radius), "half_length": float(half_length)}, _rot(rotation), _vec(translation))


def ellipsoid(semi_axes, rotation=None, translation=None) -> SdfShape:
    return SdfShape("ellipsoid", {"semi_axes": np.asarray(semi_axes, dtype=np.float64)}, _rot(rotation), _vec(translation))


def _rot(rotation):
    return np.eye(3) if rotation is None else np.asarray(rotation, dtype=np.float64)


def _vec(translation):
    return np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)


def _wedge_profile(params: dict) -> np.ndarray:
    """Counter-clockwise cross-section polygon in the (z, y) plane."""
    half_t = 0.5 * params["spine_thickness"]
    height = params["height"]
    tan_a = np.tan(params["half_angle"])
    if not 0.0 < params["half_angle"] < np.pi / 2:
        raise ParameterDomainError("Edge half angle must lie in (0, pi/2)")
    shoulder = half_t / tan_a
    arc_center = height - half_t
    if shoulder > arc_center:
        raise ParameterDomainError("Blade too short for its spine thickness and edge angle")
    angles = np.linspace(0.0, np.pi, KNIFE_SPINE_ARC_SEGMENTS + 1)
    arc = np.stack([half_t * np.cos(angles), arc_center + half_t * np.sin(angles)], axis=1)
    return np.vstack([[0.0, 0.0], [half_t, shoulder], arc, [-half_t, shoulder]])


def _convex_polygon_sdf(p: np.ndarray, verts: np.ndarray) -> np.ndarray:
    a = verts
    e = np.roll(verts, -1, axis=0) - a
    w = p[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(w * e, axis=-1) / np.sum(e * e, axis=-1), 0.0, 1.0)
    d = w - t[..., None] * e
    dist = np.sqrt(np.min(np.sum(d * d, axis=-1), axis=1))
    outward = np.stack([e[:, 1], -e[:, 0]], axis=1) / np.linalg.norm(e, axis=1)[:, None]
    inside = np.all(np.sum(w * outward, axis=-1) <= 0.0, axis=1)
    return np.where(inside, -dist, dist)


def _sdf_halfspace(p, params):
    return p @ params["normal"] - params["offset"]


def _sdf_box(p, params):
    q = np.abs(p) - params["half_extents"]
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    return outside + np.minimum(q.max(axis=1), 0.0)


def _sdf_wedge(p, params):
    d2 = _convex_polygon_sdf(p[:, [2, 1]], params["profile"])
    dl = np.abs(p[:, 0]) - 0.5 * params["length"]
    return np.minimum(np.maximum(d2, dl), 0.0) + np.hypot(np.maximum(d2, 0.0), np.maximum(dl, 0.0))


def _sdf_sphere(p, params):
    return np.linalg.norm(p, axis=1) - params["radius"]


def _sdf_capsule(p, params):
    seg = np.zeros_like(p)
    seg[:, 0] = np.clip(p[:, 0], -params["half_length"], params["half_length"])
    return np.linalg.norm(p - seg, axis=1) - params["radius"]


def _sdf_ellipsoid(p, params):
    # Bound-style approximation; sign is exact
    semi = params["semi_axes"]
    k0 = np.linalg.norm(p / semi, axis=1)
    k1 = np.linalg.norm(p / semi**2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = k0 * (k0 - 1.0) / k1
    return np.where(k1 > 0.0, phi, -semi.min())


_LOCAL_SDF = {
    "halfspace": _sdf_halfspace,
    "box": _sdf_box,
    "wedge-blade": _sdf_wedge,
    "sphere": _sdf_sphere,
    "capsule": _sdf_capsule,
    "ellipsoid": _sdf_ellipsoid,
}


def _normal_halfspace(p, params):
    return _sdf_halfspace(p, params), np.broadcast_to(params["normal"], p.shape).copy()


def _normal_box(p, params):
    h = params["half_extents"]
    q = np.abs(p) - h
    sign = np.where(p < 0.0, -1.0, 1.0)
    phi = _sdf_box(p, params)
    outside = np.maximum(q, 0.0)
    out_norm = np.linalg.norm(outside, axis=1)
    n = np.zeros_like(p)
    is_out = out_norm > 0.0
    n[is_out] = sign[is_out] * outside[is_out] / out_norm[is_out, None]
    # inside or on the surface: nearest face, ties go to the first axis
    rows = np.flatnonzero(~is_out)
    axis = np.argmax(q[rows], axis=1)
    n[rows, axis] = sign[rows, axis]
    return phi, n


def _normal_sphere(p, params):
    r = np.linalg.norm(p, axis=1)
    n = np.tile([0.0, 1.0, 0.0], (len(p), 1))
    nz = r > 0.0
    n[nz] = p[nz] / r[nz, None]
    return r - params["radius"], n


def _normal_capsule(p, params):
    seg = np.zeros_like(p)
    seg[:, 0] = np.clip(p[:, 0], -params["half_length"], params["half_length"])
    d = p - seg
    r = np.linalg.norm(d, axis=1)
    n = np.tile([0.0, 1.0, 0.0], (len(p), 1))
    nz = r > 0.0
    n[nz] = d[nz] / r[nz, None]
    return r - params["radius"], n


def _finite_difference_normal(sdf):
    def normal(p, params):
        phi = sdf(p, params)
        grad = np.empty_like(p)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = _FD_STEP
            grad[:, axis] = (sdf(p + step, params) - sdf(p - step, params)) / (2.0 * _FD_STEP)
        length = np.linalg.norm(grad, axis=1)
        grad[length == 0.0] = (0.0, 1.0, 0.0)
        length[length == 0.0] = 1.0
        return phi, grad / length[:, None]

    return normal


_LOCAL_NORMAL = {
    "halfspace": _normal_halfspace,
    "box": _normal_box,
    "wedge-blade": _finite_difference_normal(_sdf_wedge),
    "sphere": _normal_sphere,
    "capsule": _normal_capsule,
    "ellipsoid": _finite_difference_normal(_sdf_ellipsoid),
}


def sdf_sample(shape: SdfShape, x):
    return shape.sample(x)


@dataclass(frozen=True)
class ContactParams:
    restitution: float = RESTITUTION
    friction_mu: float = FRICTION_MU
    query_aabb_pad: float = QUERY_AABB_PAD_CELLS * DX_REF
    threshold_cells: float = CONTACT_THRESHOLD_CELLS
    approach_window: bool = True
    cull: bool = True


def resolve_node_contact(v_node, v_tool, n, params: ContactParams):
    """Inelastic-normal, Coulomb-capped tangential response in the tool frame."""
    v_node = np.asarray(v_node, dtype=np.float64)
    single = v_node.ndim == 1
    v_node = np.atleast_2d(v_node)
    v_tool = np.broadcast_to(np.asarray(v_tool, dtype=np.float64), v_node.shape)
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), v_node.shape)
    if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
        raise InternalInvariantError("contact normal must have unit length")
    u = v_node - v_tool
    u_n = np.sum(u * n, axis=1)
    u_t = u - u_n[:, None] * n
    u_n_new = -params.restitution * u_n
    du_n = np.abs(u_n_new - u_n)
    ut_norm = np.linalg.norm(u_t, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(ut_norm > 0.0, np.maximum(0.0, 1.0 - params.friction_mu * du_n / ut_norm), 0.0)
    resolved = v_tool + u_n_new[:, None] * n + scale[:, None] * u_t
    out = np.where((u_n < 0.0)[:, None], resolved, v_node)
    return out[0] if single else out


@dataclass
class ContactResult:
    nodes: np.ndarray
    impulse: np.ndarray
    approach: float


def resolve_grid_contact(grid, shape: SdfShape, velocity_fn, params: ContactParams, dx: float) -> ContactResult:
    """Resolve contact for every active node within ``threshold_cells * dx`` of the shape.

    ``velocity_fn`` maps node positions to tool velocities. The impulse is
    the momentum change of the contacted nodes relative to their velocity
    on entry, summed in ascending node order.
    """
    threshold = params.threshold_cells * dx
    if params.cull and params.query_aabb_pad < threshold:
        raise ConfigError("query_aabb_pad must cover the contact threshold")
    candidates = grid.active
    pos = grid.node_positions(candidates)
    bounds = shape.aabb() if params.cull else None
    if bounds is not None:
        lo, hi = bounds
        pad = params.query_aabb_pad
        keep = np.all((pos >= lo - pad) & (pos <= hi + pad), axis=1)
        candidates, pos = candidates[keep], pos[keep]
    if candidates.size == 0:
        return ContactResult(candidates, np.zeros(3), 0.0)
    phi, n = shape.sample(pos)
    hit = phi < threshold
    nodes = candidates[hit]
    if nodes.size == 0:
        return ContactResult(nodes, np.zeros(3), 0.0)
    v_tool = velocity_fn(pos[hit])
    v_in = grid.v[nodes]
    u_n = np.sum((v_in - v_tool) * n[hit], axis=1)
    approach = float(np.sum(-u_n[u_n < 0.0]))
    v_out = resolve_node_contact(v_in, v_tool, n[hit], params)
    grid.v[nodes] = v_out
    grid.v_after[nodes] = v_out
    impulse = np.sum(grid.mass[nodes, None] * (v_out - v_in), axis=0)
    return ContactResult(nodes, impulse, approach)


@dataclass(frozen=True)
class ForceRecord:
    t: float
    F_avg: np.ndarray
    magnitude: float
    window_impulse: np.ndarray


def accumulate_force(impulses, dt_acc: float, t: float = 0.0) -> ForceRecord:
    """Average force of one output window from its per-event impulses."""
    if not dt_acc > 0.0:
        raise ConfigError(f"dt_acc must be positive, got {dt_acc}")
    total = np.zeros(3)
    for impulse in impulses:
        total = total + np.asarray(impulse, dtype=np.float64)
    F_avg = total / dt_acc
    return ForceRecord(t=t, F_avg=F_avg, magnitude=float(np.linalg.norm(F_avg)), window_impulse=total)


class ForceAccumulator:
    """Collects per-step impulses and emits one ForceRecord per window."""

    def __init__(self, dt_acc: float):
        if not dt_acc > 0.0:
            raise ConfigError(f"dt_acc must be positive, got {dt_acc}")
        self.dt_acc = dt_acc
        self.pending: list[np.ndarray] = []
        self.records: list[ForceRecord] = []

    def add(self, impulse) -> None:
        self.pending.append(np.asarray(impulse, dtype=np.float64))

    def flush(self, t: float) -> ForceRecord:
        record = accumulate_force(self.pending, self.dt_acc, t)
        self.records.append(record)
        self.pending = []
        return record

    @property
    def peak(self) -> float:
        return max((r.magnitude for r in self.records), default=0.0)


def contact_strength(approach_accumulator: float, config) -> float:
    c_norm = C_NORM_SCALE * config.dx / config.dt
    return float(min(1.0, approach_accumulator / c_norm))


class ApproachWindow:
    """Trailing sum of per-step approach speeds over the last ``steps`` steps."""

    def __init__(self, steps: int):
        if steps < 1:
            raise ConfigError(f"approach window needs at least one step, got {steps}")
        self.history: deque[float] = deque(maxlen=steps)

    def push(self, approach: float) -> float:
        self.history.append(float(approach))
        return float(sum(self.history))
