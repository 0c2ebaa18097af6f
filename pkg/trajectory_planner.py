# trajectory_planner.py
"""Knife trajectories for every cut style and cut state, scene augmentation,
geometric style transfer, contact detection and success evaluation.

World frame: y is vertical, the board is the plane ``y = BOARD_TOP``. The
knife pose origin is the midpoint of the cutting edge; the blade's local z
axis is its lateral normal and is aligned with the cut axis.
"""

from dataclasses import dataclass, field, fields, replace

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation, Slerp

from config import (
    AABB_SURFACE_SAMPLES,
    AUG_HEIGHT_RANGE,
    AUG_POSITION_OFFSET,
    AUG_ROTATION_RANGE,
    AUG_SCALE_RANGE,
    AUG_SPEED_RANGE,
    APPROACH_SPEED,
    BIAS_ANGLE,
    BOARD_TOP,
    CONTACT_TOL,
    CUT_HEIGHT,
    CUT_STYLES,
    DEFAULT_OBJECT_KIND,
    GUILLOTINE_TIP_MARGIN,
    KNIFE_LENGTH,
    OBJECT_CENTER_XZ,
    OBJECT_PRIMITIVES,
    PARTICLE_MARGIN_CELLS,
    SAW_AMPLITUDE,
    SAW_FREQUENCY_RANGE,
    SUCCESS_TOL_FRAC,
    TRAJ_SAMPLE_DT,
)
from contact_sdf import SdfShape, box, capsule, ellipsoid, sphere, wedge_blade
from errors import ConfigError, DegenerateObjectError, PlanningError, UnsupportedStyleError
from mpm_core import Material, SimConfig

PHASES = ("approach", "contact", "retract")
STATE_KINDS = ("Ratio", "Middle", "Split")
_AUGMENT_ATTEMPTS = 100


@dataclass(frozen=True)
class CutState:
    kind: str
    ratio: float | None = None
    side: str = "left"
    k: int | None = None
    boundary: int | None = None

    def __post_init__(self):
        if self.kind not in STATE_KINDS:
            raise ConfigError(f"Unknown cut state: {self.kind}")
        if self.side not in ("left", "right"):
            raise ConfigError(f"Cut side must be left or right, got {self.side}")
        if self.kind == "Ratio":
            if self.ratio is None or not 0.0 < self.ratio < 1.0:
                raise ConfigError(f"Ratio must lie strictly inside (0, 1), got {self.ratio}")
            # canonical decimal value keeps left/right duality exact
            object.__setattr__(self, "ratio", round(float(self.ratio), 9))
        if self.kind == "Split":
            if self.k is None or self.k < 2:
                raise ConfigError(f"Split needs k >= 2 pieces, got {self.k}")
            if self.boundary is not None and not 1 <= self.boundary <= self.k - 1:
                raise ConfigError(f"Split boundary must lie in [1, {self.k - 1}]")

    @classmethod
    def ratio_cut(cls, r: float, side: str = "left") -> "CutState":
        return cls("Ratio", ratio=r, side=side)

    @classmethod
    def middle(cls) -> "CutState":
        return cls("Middle")

    @classmethod
    def split(cls, k: int, boundary: int | None = None, side: str = "left") -> "CutState":
        return cls("Split", k=k, boundary=boundary, side=side if boundary is not None else "left")

    @property
    def label(self) -> str:
        if self.kind == "Ratio":
            return f"Ratio({self.ratio:g},{self.side})"
        if self.kind == "Split":
            if self.boundary is None:
                return f"Split({self.k})"
            return f"Split({self.k},b{self.boundary},{self.side})"
        return "Middle"

    def fractions(self) -> list[float]:
        """Cut positions as fractions of the object length from the AABB minimum."""
        if self.kind == "Middle":
            return [0.5]
        if self.kind == "Ratio":
            return [self.ratio if self.side == "left" else round(1.0 - self.ratio, 9)]
        if self.boundary is not None:
            index = self.boundary if self.side == "left" else self.k - self.boundary
            return [index / self.k]
        return [i / self.k for i in range(1, self.k)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ratio": self.ratio, "side": self.side, "k": self.k, "boundary": self.boundary}

    @classmethod
    def from_dict(cls, data: dict) -> "CutState":
        return cls(**data)


@dataclass(frozen=True)
class CutTask:
    style: str = "Normal"
    state: CutState = field(default_factory=CutState.middle)
    object_kind: str = DEFAULT_OBJECT_KIND
    h: float = CUT_HEIGHT
    v: float = APPROACH_SPEED

    def __post_init__(self):
        if self.style not in CUT_STYLES:
            raise ConfigError(f"Unknown cut style: {self.style}")

    def to_dict(self) -> dict:
        return {"style": self.style, "state": self.state.to_dict(), "object_kind": self.object_kind, "h": self.h, "v": self.v}

    @classmethod
    def from_dict(cls, data: dict) -> "CutTask":
        data = dict(data)
        if isinstance(data.get("state"), dict):
            data["state"] = CutState.from_dict(data["state"])
        return cls(**data)


@dataclass(frozen=True)
class SceneSpec:
    kind: str = DEFAULT_OBJECT_KIND
    position: tuple[float, float] = OBJECT_CENTER_XZ
    scale: float = 1.0
    rotation: float = 0.0
    material: Material = field(default_factory=Material)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OBJECT_PRIMITIVES:
            raise ConfigError(f"Unknown object kind: {self.kind}")
        if not self.scale > 0.0:
            raise ConfigError("Object scale must be positive")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "position": list(self.position),
            "scale": self.scale,
            "rotation": self.rotation,
            "material": self.material.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SceneSpec":
        data = dict(data)
        if "position" in data:
            data["position"] = tuple(data["position"])
        if isinstance(data.get("material"), dict):
            data["material"] = Material.from_dict(data["material"])
        return cls(**data)


@dataclass(frozen=True)
class StyleParams:
    bias_angle: float = BIAS_ANGLE
    saw_amplitude: float = SAW_AMPLITUDE
    saw_frequency: float | None = None
    saw_frequency_range: tuple[float, float] = SAW_FREQUENCY_RANGE
    guillotine_tip_margin: float = GUILLOTINE_TIP_MARGIN
    blade_length: float = KNIFE_LENGTH
    sample_dt: float = TRAJ_SAMPLE_DT

    @classmethod
    def from_dict(cls, data: dict) -> "StyleParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Unknown style keys: {', '.join(unknown)}")
        data = dict(data)
        if "saw_frequency_range" in data:
            data["saw_frequency_range"] = tuple(float(f) for f in data["saw_frequency_range"])
        return cls(**data)

    def with_frequency(self, rng=None) -> "StyleParams":
        if self.saw_frequency is not None:
            return self
        rng = np.random.default_rng() if rng is None else rng
        lo, hi = self.saw_frequency_range
        return replace(self, saw_frequency=float(rng.uniform(lo, hi)))


@dataclass
class Trajectory:
    t: np.ndarray
    position: np.ndarray
    quat: np.ndarray  # (w, x, y, z)
    v_cmd: np.ndarray
    phase: np.ndarray
    style: str = "Normal"
    params: StyleParams = field(default_factory=StyleParams)
    aabb: tuple[np.ndarray, np.ndarray] | None = None
    skeleton: "Trajectory | None" = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.position = np.asarray(self.position, dtype=np.float64)
        self.quat = np.asarray(self.quat, dtype=np.float64)
        self.v_cmd = np.asarray(self.v_cmd, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=object)
        if len(self.t) > 1 and np.any(np.diff(self.t) <= 0.0):
            raise PlanningError("Trajectory timestamps must be strictly increasing")
        if not (np.isfinite(self.position).all() and np.isfinite(self.quat).all()):
            raise PlanningError("Trajectory poses must be finite")
        self._slerp = None

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def rotations(self) -> Rotation:
        return Rotation.from_quat(self.quat[:, [1, 2, 3, 0]])

    def rotation_matrices(self) -> np.ndarray:
        return self.rotations().as_matrix()

    def contact_runs(self) -> list[tuple[int, int]]:
        """Half-open index ranges of consecutive contact waypoints."""
        runs, start = [], None
        for i, phase in enumerate(self.phase):
            if phase == "contact" and start is None:
                start = i
            elif phase != "contact" and start is not None:
                runs.append((start, i))
                start = None
        if start is not None:
            runs.append((start, len(self.phase)))
        return runs

    def pose_at(self, tau: float) -> tuple[np.ndarray, np.ndarray, int]:
        """Interpolated (rotation matrix, position, segment index) at time ``tau``."""
        tau = float(np.clip(tau, self.t[0], self.t[-1]))
        i = int(np.clip(np.searchsorted(self.t, tau, side="right") - 1, 0, len(self.t) - 2 if len(self.t) > 1 else 0))
        if len(self.t) == 1:
            return self.rotation_matrices()[0], self.position[0].copy(), 0
        frac = (tau - self.t[i]) / (self.t[i + 1] - self.t[i])
        position = self.position[i] + frac * (self.position[i + 1] - self.position[i])
        if self._slerp is None:
            self._slerp = Slerp(self.t, self.rotations())
        return self._slerp([tau]).as_matrix()[0], position, i

    def copy(self) -> "Trajectory":
        return Trajectory(
            self.t.copy(), self.position.copy(), self.quat.copy(), self.v_cmd.copy(), self.phase.copy(),
            self.style, self.params, self.aabb, self.skeleton,
        )

    def same_path(self, other: "Trajectory") -> bool:
        return (
            self.style == other.style
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.quat, other.quat)
            and np.array_equal(self.v_cmd, other.v_cmd)
            and list(self.phase) == list(other.phase)
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "t": self.t,
                "px": self.position[:, 0],
                "py": self.position[:, 1],
                "pz": self.position[:, 2],
                "qw": self.quat[:, 0],
                "qx": self.quat[:, 1],
                "qy": self.quat[:, 2],
                "qz": self.quat[:, 3],
                "v_cmd": self.v_cmd,
                "phase": self.phase,
                "style": self.style,
            }
        )

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, params: StyleParams | None = None, aabb=None) -> "Trajectory":
        """Rebuild from ``to_frame`` output; style parameters and bounds are not in the frame."""
        style = str(frame["style"].iloc[0]) if len(frame) else "Normal"
        if aabb is not None:
            aabb = (np.asarray(aabb[0], dtype=np.float64), np.asarray(aabb[1], dtype=np.float64))
        return cls(
            t=frame["t"].to_numpy(),
            position=frame[["px", "py", "pz"]].to_numpy(),
            quat=frame[["qw", "qx", "qy", "qz"]].to_numpy(),
            v_cmd=frame["v_cmd"].to_numpy(),
            phase=frame["phase"].to_numpy(dtype=object),
            style=style,
            params=params or StyleParams(),
            aabb=aabb,
        )


@dataclass(frozen=True)
class Verdict:
    success: bool
    reason: str
    plane_errors: tuple[float, ...]
    angle_error: float
    planes_within_tolerance: int

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "reason": self.reason,
            "plane_errors": list(self.plane_errors),
            "angle_error": self.angle_error,
            "planes_within_tolerance": self.planes_within_tolerance,
        }


def compute_aabb(points) -> tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise DegenerateObjectError("AABB of an empty point set")
    return points.min(axis=0), points.max(axis=0)


def cut_axis_of(aabb) -> int:
    """Longest horizontal AABB axis (x wins ties)."""
    lo, hi = aabb
    extent = np.asarray(hi) - np.asarray(lo)
    return 0 if extent[0] >= extent[2] else 2


def cut_planes(aabb, state: CutState, cut_axis: int) -> list[float]:
    lo, hi = (np.asarray(c, dtype=np.float64) for c in aabb)
    length = hi[cut_axis] - lo[cut_axis]
    if not length > 0.0:
        raise DegenerateObjectError(f"Object has zero extent along axis {cut_axis}")
    return sorted(float(lo[cut_axis] + f * length) for f in state.fractions())


def yaw_for_axis(cut_axis: int) -> Rotation:
    """Blade orientation whose lateral normal points along ``cut_axis``."""
    return Rotation.identity() if cut_axis == 2 else Rotation.from_euler("y", 90.0, degrees=True)


@dataclass(frozen=True)
class _Pass:
    plane: float
    cut_axis: int
    center_b: float
    half_b: float
    y_top: float
    y_bottom: float
    y_start: float
    speed: float

    @property
    def length_axis(self) -> int:
        return 2 if self.cut_axis == 0 else 0

    @property
    def depth(self) -> float:
        return self.y_top - self.y_bottom

    def point(self, a: float, b: float, y: float) -> np.ndarray:
        p = np.zeros(3)
        p[self.cut_axis], p[self.length_axis], p[1] = a, b, y
        return p


class _Builder:
    """Accumulates waypoints segment by segment; each segment omits its end point."""

    def __init__(self, sample_dt: float):
        self.sample_dt = sample_dt
        self.t: list[float] = []
        self.pos: list[np.ndarray] = []
        self.rot: list[np.ndarray] = []
        self.phase: list[str] = []
        self.clock = 0.0
        self.pending_end = None

    def keep_prefix(self, traj: "Trajectory", stop: int) -> None:
        self.t = list(traj.t[:stop])
        self.pos = list(traj.position[:stop])
        self.rot = list(traj.quat[:stop][:, [1, 2, 3, 0]])
        self.phase = list(traj.phase[:stop])
        self.clock = float(traj.t[stop])

    def segment(self, duration: float, phase: str, pose_fn) -> None:
        n = max(1, int(np.ceil(duration / self.sample_dt - 1e-9)))
        for k in range(n):
            s = k / n
            rotation, position = pose_fn(s)
            self.t.append(self.clock + s * duration)
            self.pos.append(position)
            self.rot.append(rotation.as_quat())
            self.phase.append(phase)
        self.clock += duration

    def finish(self, pose, phase: str = "retract") -> None:
        rotation, position = pose
        self.t.append(self.clock)
        self.pos.append(position)
        self.rot.append(rotation.as_quat())
        self.phase.append(phase)


def _pitched(yaw: Rotation, theta: float) -> Rotation:
    return yaw * Rotation.from_euler("z", -theta)


def _guillotine_geometry(geom: _Pass, yaw: Rotation, params: StyleParams):
    half_len = 0.5 * params.blade_length
    tip_dir = yaw.apply([1.0, 0.0, 0.0])
    tip = geom.point(geom.plane, geom.center_b, geom.y_bottom) + tip_dir * half_len
    run = max(half_len - geom.half_b - params.guillotine_tip_margin, 1e-6)
    theta0 = float(np.arctan2(geom.depth, run))
    return tip, theta0


def _guillotine_pose(tip: np.ndarray, yaw: Rotation, theta: float, half_len: float):
    rot = _pitched(yaw, theta)
    return rot, tip - rot.apply([half_len, 0.0, 0.0])


def _approach_start(style: str, geom: _Pass, yaw: Rotation, params: StyleParams):
    if style == "Guillotine":
        tip, theta0 = _guillotine_geometry(geom, yaw, params)
        rot, pos = _guillotine_pose(tip, yaw, theta0, 0.5 * params.blade_length)
        return rot, pos + np.array([0.0, geom.y_start - geom.y_top, 0.0])
    a = geom.plane - 0.5 * _bias_offset(geom, params) if style == "Bias" else geom.plane
    return yaw, geom.point(a, geom.center_b, geom.y_start)


def _bias_offset(geom: _Pass, params: StyleParams) -> float:
    return geom.depth * np.tan(params.bias_angle)


def _emit_approach(builder: _Builder, style: str, geom: _Pass, yaw: Rotation, params: StyleParams) -> None:
    rot0, start = _approach_start(style, geom, yaw, params)
    rise = geom.y_start - geom.y_top
    builder.segment(rise / geom.speed, "approach", lambda s: (rot0, start - np.array([0.0, s * rise, 0.0])))


def _emit_contact_and_retract(builder: _Builder, style: str, geom: _Pass, yaw: Rotation, params: StyleParams) -> None:
    depth = geom.depth
    if style == "Normal":
        start = geom.point(geom.plane, geom.center_b, geom.y_top)
        builder.segment(depth / geom.speed, "contact", lambda s: (yaw, start - np.array([0.0, s * depth, 0.0])))
        end_rot, end = yaw, geom.point(geom.plane, geom.center_b, geom.y_bottom)
    elif style == "Bias":
        offset = _bias_offset(geom, params)
        a0 = geom.plane - 0.5 * offset
        path = np.hypot(depth, offset)
        builder.segment(
            path / geom.speed,
            "contact",
            lambda s: (yaw, geom.point(a0 + s * offset, geom.center_b, geom.y_top - s * depth)),
        )
        end_rot, end = yaw, geom.point(a0 + offset, geom.center_b, geom.y_bottom)
    elif style == "Saw":
        duration = depth / geom.speed
        omega = 2.0 * np.pi * params.saw_frequency
        amp = params.saw_amplitude

        def saw_pose(s):
            return yaw, geom.point(geom.plane, geom.center_b + amp * np.sin(omega * s * duration), geom.y_top - s * depth)

        builder.segment(duration, "contact", saw_pose)
        end_rot, end = saw_pose(1.0)
    else:
        half_len = 0.5 * params.blade_length
        tip, theta0 = _guillotine_geometry(geom, yaw, params)
        builder.segment(depth / geom.speed, "contact", lambda s: _guillotine_pose(tip, yaw, (1.0 - s) * theta0, half_len))
        end_rot, end = _guillotine_pose(tip, yaw, 0.0, half_len)
    rise = geom.y_start - end[1]
    builder.segment(rise / geom.speed, "retract", lambda s: (end_rot, end + np.array([0.0, s * rise, 0.0])))
    builder.pending_end = (end_rot, end + np.array([0.0, rise, 0.0]))


def _emit_traverse(builder: _Builder, start_pose, end_pose, speed: float) -> None:
    (r0, p0), (r1, p1) = start_pose, end_pose
    distance = float(np.linalg.norm(p1 - p0))
    duration = max(distance / speed, builder.sample_dt)
    slerp = Slerp([0.0, 1.0], Rotation.concatenate([r0, r1]))
    builder.segment(duration, "approach", lambda s: (slerp([s])[0], p0 + s * (p1 - p0)))


def _finalize(builder: _Builder, style: str, params: StyleParams, aabb) -> Trajectory:
    builder.finish(builder.pending_end)
    t = np.array(builder.t)
    pos = np.array(builder.pos)
    quat_xyzw = np.array(builder.rot)
    seg_speed = np.linalg.norm(np.diff(pos, axis=0), axis=1) / np.diff(t)
    v_cmd = np.append(seg_speed, seg_speed[-1] if len(seg_speed) else 0.0)
    return Trajectory(
        t=t,
        position=pos,
        quat=quat_xyzw[:, [3, 0, 1, 2]],
        v_cmd=v_cmd,
        phase=np.array(builder.phase, dtype=object),
        style=style,
        params=params,
        aabb=aabb,
    )


def _passes(task: CutTask, planes, aabb) -> list[_Pass]:
    lo, hi = (np.asarray(c, dtype=np.float64) for c in aabb)
    axis = cut_axis_of((lo, hi))
    b = 2 if axis == 0 else 0
    passes = []
    for plane in sorted(planes):
        if not lo[axis] <= plane <= hi[axis]:
            raise PlanningError(f"Cut plane {plane:.4f} lies outside the object AABB")
        passes.append(
            _Pass(
                plane=float(plane),
                cut_axis=axis,
                center_b=0.5 * (lo[b] + hi[b]),
                half_b=0.5 * (hi[b] - lo[b]),
                y_top=float(hi[1]),
                y_bottom=float(lo[1]),
                y_start=float(hi[1] + task.h),
                speed=task.v,
            )
        )
    return passes


def generate_trajectory(task: CutTask, planes, aabb, params: StyleParams | None = None, rng=None) -> Trajectory:
    """Approach, contact and retract waypoints for every plane, in ascending plane order."""
    if not planes:
        raise PlanningError("At least one cut plane is required")
    if not (task.h > 0.0 and task.v > 0.0):
        raise PlanningError("Cut height and approach speed must be positive")
    params = (params or StyleParams())
    if task.style == "Saw":
        params = params.with_frequency(rng)
    passes = _passes(task, planes, aabb)
    yaw = yaw_for_axis(passes[0].cut_axis)
    builder = _Builder(params.sample_dt)
    for i, geom in enumerate(passes):
        if i > 0:
            _emit_traverse(builder, builder.pending_end, _approach_start(task.style, geom, yaw, params), geom.speed)
        _emit_approach(builder, task.style, geom, yaw, params)
        _emit_contact_and_retract(builder, task.style, geom, yaw, params)
    return _finalize(builder, task.style, params, (np.asarray(aabb[0]), np.asarray(aabb[1])))


def _pass_starts(traj: Trajectory, runs) -> list[int]:
    """Index of the first waypoint of every pass (its approach or traverse)."""
    starts = [0]
    for _, end in runs[:-1]:
        i = end
        while i < len(traj) and traj.phase[i] != "approach":
            i += 1
        starts.append(i)
    return starts


def _infer_passes(traj: Trajectory, runs, starts) -> list[_Pass]:
    """Recover per-pass cut geometry from a Normal trajectory's waypoints."""
    lateral = traj.rotation_matrices()[:, :, 2]
    passes = []
    for (start, end), first in zip(runs, starts):
        axis = 0 if abs(lateral[start, 0]) >= abs(lateral[start, 2]) else 2
        b = 2 if axis == 0 else 0
        half_b = 0.0
        if traj.aabb is not None:
            half_b = 0.5 * float(traj.aabb[1][b] - traj.aabb[0][b])
        passes.append(
            _Pass(
                plane=float(traj.position[start, axis]),
                cut_axis=axis,
                center_b=float(traj.position[start, b]),
                half_b=half_b,
                y_top=float(traj.position[start, 1]),
                y_bottom=float(traj.position[min(end, len(traj) - 1), 1]),
                y_start=float(traj.position[first, 1]),
                speed=float(traj.v_cmd[start]),
            )
        )
    return passes


def style_transfer(traj: Trajectory, target_style: str, contact_start: int, params: StyleParams | None = None, rng=None) -> Trajectory:
    """Restyle a Normal trajectory from ``contact_start`` onward.

    Waypoints before ``contact_start`` are kept bit-identical. The pass
    containing ``contact_start`` and every later pass get the target
    style's motion on the same plane and depth; the result keeps the input
    as its ``skeleton``.
    """
    if traj.style != "Normal":
        raise UnsupportedStyleError(f"Style transfer expects a Normal trajectory, got {traj.style}")
    if target_style not in CUT_STYLES:
        raise ConfigError(f"Unknown cut style: {target_style}")
    if not 0 <= contact_start < len(traj):
        raise PlanningError(f"contact_start {contact_start} is not a waypoint index")
    if target_style == "Normal":
        return traj.copy()
    runs = traj.contact_runs()
    if not runs:
        raise PlanningError("Trajectory has no contact phase to restyle")
    params = params or traj.params
    if target_style == "Saw":
        params = params.with_frequency(rng)
    starts = _pass_starts(traj, runs)
    passes = _infer_passes(traj, runs, starts)
    yaw = yaw_for_axis(passes[0].cut_axis)
    current = max(i for i, s in enumerate(starts) if s <= contact_start)
    run_start, run_end = runs[current]
    geom = passes[current]

    builder = _Builder(params.sample_dt)
    builder.keep_prefix(traj, contact_start)
    here = (Rotation.from_quat(traj.quat[contact_start][[1, 2, 3, 0]]), traj.position[contact_start].copy())
    if contact_start < run_start:
        target = _approach_start(target_style, geom, yaw, params)
        drop = target[1] + np.array([0.0, geom.y_top - geom.y_start, 0.0])
        _emit_traverse(builder, here, (target[0], drop), geom.speed)
        _emit_contact_and_retract(builder, target_style, geom, yaw, params)
    elif contact_start < run_end:
        # restyle the remaining depth from the current height
        _emit_contact_and_retract(builder, target_style, replace(geom, y_top=float(here[1][1])), yaw, params)
    else:
        rot, end = here
        rise = geom.y_start - end[1]
        if rise > CONTACT_TOL:
            builder.segment(rise / geom.speed, "retract", lambda s: (rot, end + np.array([0.0, s * rise, 0.0])))
            end = end + np.array([0.0, rise, 0.0])
        builder.pending_end = (rot, end)
    for geom in passes[current + 1:]:
        _emit_traverse(builder, builder.pending_end, _approach_start(target_style, geom, yaw, params), geom.speed)
        _emit_approach(builder, target_style, geom, yaw, params)
        _emit_contact_and_retract(builder, target_style, geom, yaw, params)
    out = _finalize(builder, target_style, params, traj.aabb)
    out.skeleton = traj
    return out


def interpolate_pose(traj: Trajectory, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Knife (rotation matrix, position) at trajectory time ``tau`` (clamped to the ends)."""
    rotation, position, _ = traj.pose_at(tau)
    return rotation, position


def blade_sample_points(blade: SdfShape, samples_along: int = 25) -> np.ndarray:
    """Local-frame points on the blade surface: the edge line and the profile outline."""
    half = 0.5 * blade.params["length"]
    xs = np.linspace(-half, half, samples_along)
    profile = blade.params["profile"]
    edge = np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1)
    outline = np.array([[x, y, z] for x in xs[::3] for z, y in profile])
    return np.vstack([edge, outline])


def aabb_surface_samples(aabb, per_edge: int = AABB_SURFACE_SAMPLES) -> np.ndarray:
    lo, hi = (np.asarray(c, dtype=np.float64) for c in aabb)
    grids = [np.linspace(lo[i], hi[i], per_edge) for i in range(3)]
    faces = []
    for axis in range(3):
        u, w = [i for i in range(3) if i != axis]
        gu, gw = np.meshgrid(grids[u], grids[w], indexing="ij")
        for value in (lo[axis], hi[axis]):
            face = np.zeros((gu.size, 3))
            face[:, axis], face[:, u], face[:, w] = value, gu.ravel(), gw.ravel()
            faces.append(face)
    return np.vstack(faces)


def detect_contact_phase(traj: Trajectory, region, blade: SdfShape | None = None, tol: float = CONTACT_TOL) -> int | None:
    """First waypoint index at which the blade touches or overlaps the object.

    ``region`` is the object's SdfShape or an AABB ``(lo, hi)``; the test
    evaluates the object SDF at blade surface samples.
    """
    blade = blade or wedge_blade(length=traj.params.blade_length)
    if isinstance(region, SdfShape):
        object_shape = region
    else:
        lo, hi = (np.asarray(c, dtype=np.float64) for c in region)
        object_shape = box(np.maximum(0.5 * (hi - lo), 1e-12), translation=0.5 * (lo + hi))
    local_points = blade_sample_points(blade)
    rotations = traj.rotation_matrices()
    for i in range(len(traj)):
        world = local_points @ rotations[i].T + traj.position[i]
        if np.min(object_shape.distance(world)) <= tol:
            return i
    return None


def evaluate_success(
    achieved_planes,
    target_planes,
    object_len: float,
    blade_axis,
    target_axis,
    tol_frac: float = SUCCESS_TOL_FRAC,
    segments: int | None = None,
) -> Verdict:
    """Compare achieved cut planes with the targets.

    When `segments` is given, the object must also have come apart into at
    least one piece more than there are planes.
    """
    if not object_len > 0.0:
        raise DegenerateObjectError("Object length must be positive")
    blade_axis = np.asarray(blade_axis, dtype=np.float64)
    target_axis = np.asarray(target_axis, dtype=np.float64)
    cosine = abs(blade_axis @ target_axis) / (np.linalg.norm(blade_axis) * np.linalg.norm(target_axis))
    angle_error = float(np.arccos(np.clip(cosine, 0.0, 1.0)))
    achieved = sorted(float(p) for p in achieved_planes)
    target = sorted(float(p) for p in target_planes)
    if len(achieved) != len(target):
        return Verdict(False, "count mismatch", (), angle_error, 0)
    errors = tuple(abs(a - b) for a, b in zip(achieved, target))
    within = sum(e <= tol_frac * object_len for e in errors)
    angle_ok = angle_error <= tol_frac * (np.pi / 2)
    if segments is not None and segments < len(target) + 1:
        return Verdict(False, "not separated", errors, angle_error, within)
    if within < len(errors):
        return Verdict(False, "position out of tolerance", errors, angle_error, within)
    if not angle_ok:
        return Verdict(False, "angle out of tolerance", errors, angle_error, within)
    return Verdict(True, "ok", errors, angle_error, within)


def object_shape(scene: SceneSpec, board_top: float = BOARD_TOP) -> SdfShape:
    """Analytic primitive of the scene object resting on the board."""
    primitive, dims = OBJECT_PRIMITIVES[scene.kind]
    dims = np.asarray(dims, dtype=np.float64) * scene.scale
    rot = Rotation.from_euler("y", scene.rotation).as_matrix()
    x, z = scene.position
    if primitive == "sphere":
        half_y = dims[0]
        shape = sphere(dims[0])
    elif primitive == "capsule":
        half_y = dims[0]
        shape = capsule(dims[0], dims[1], rotation=rot)
    elif primitive == "ellipsoid":
        half_y = dims[1]
        shape = ellipsoid(dims, rotation=rot)
    else:
        half_y = dims[1]
        shape = box(dims, rotation=rot)
    return shape.with_pose(shape.rotation, np.array([x, board_top + half_y, z]))


def object_aabb(scene: SceneSpec, board_top: float = BOARD_TOP):
    return object_shape(scene, board_top).aabb()


def aabb_in_workspace(aabb, config: SimConfig, board_top: float = BOARD_TOP) -> bool:
    lo, hi = aabb
    margin = (PARTICLE_MARGIN_CELLS + 1) * config.dx
    upper = config.domain_size - margin
    return bool(np.all(lo >= margin) and np.all(hi <= upper) and lo[1] >= board_top - 1e-12)


@dataclass(frozen=True)
class AugmentRanges:
    """Absolute sampling intervals; a zero-width interval pins the value."""

    x: tuple[float, float]
    z: tuple[float, float]
    scale: tuple[float, float]
    rotation: tuple[float, float]
    h: tuple[float, float]
    v: tuple[float, float]
    kinds: tuple[str, ...] | None = None

    @classmethod
    def fixed(cls, scene: SceneSpec, task: CutTask) -> "AugmentRanges":
        x, z = scene.position
        return cls((x, x), (z, z), (scene.scale,) * 2, (scene.rotation,) * 2, (task.h,) * 2, (task.v,) * 2)

    @classmethod
    def around(cls, scene: SceneSpec, task: CutTask) -> "AugmentRanges":
        x, z = scene.position
        d = AUG_POSITION_OFFSET
        return cls(
            (x - d, x + d),
            (z - d, z + d),
            tuple(scene.scale * f for f in AUG_SCALE_RANGE),
            tuple(scene.rotation + r for r in AUG_ROTATION_RANGE),
            AUG_HEIGHT_RANGE,
            AUG_SPEED_RANGE,
        )

    @property
    def pinned(self) -> bool:
        """True when every interval has zero width and at most one kind is allowed."""
        widths = [getattr(self, name)[1] - getattr(self, name)[0] for name in ("x", "z", "scale", "rotation", "h", "v")]
        return all(w == 0.0 for w in widths) and (self.kinds is None or len(set(self.kinds)) == 1)

    def validate(self) -> list[str]:
        errors = []
        for name in ("x", "z", "scale", "rotation", "h", "v"):
            lo, hi = getattr(self, name)
            if lo > hi:
                errors.append(f"Range {name} has min {lo} > max {hi}")
        if self.kinds is not None and not self.kinds:
            errors.append("Object kind range is empty")
        return errors


def augment(base_task: CutTask, ranges: AugmentRanges, seed: int, base_scene: SceneSpec | None = None, config: SimConfig | None = None):
    """Sample a randomized (scene, task) pair around a base task.

    The sampled scene takes `seed` for its particle jitter unless the ranges
    are pinned, in which case the base scene is reproduced with its own seed.
    """
    errors = ranges.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    base_scene = base_scene or SceneSpec(kind=base_task.object_kind)
    config = config or SimConfig()
    rng = np.random.default_rng(seed)
    for _ in range(_AUGMENT_ATTEMPTS):
        x = float(rng.uniform(*ranges.x))
        z = float(rng.uniform(*ranges.z))
        scale = float(rng.uniform(*ranges.scale))
        rotation = float(rng.uniform(*ranges.rotation))
        h = float(rng.uniform(*ranges.h))
        v = float(rng.uniform(*ranges.v))
        kind = base_scene.kind if ranges.kinds is None else str(ranges.kinds[rng.integers(len(ranges.kinds))])
        scene_seed = base_scene.seed if ranges.pinned else seed
        scene = replace(base_scene, kind=kind, position=(x, z), scale=scale, rotation=rotation, seed=scene_seed)
        if aabb_in_workspace(object_aabb(scene), config):
            return scene, replace(base_task, object_kind=kind, h=h, v=v)
    raise PlanningError(f"Randomization ranges never place the object inside the workspace (seed {seed})")
