# validation.py
import numpy as np

from config import CUT_STYLES, DAMAGE_MODES, FORCE_MODEL_KINDS, J_CLAMP_MODES, REDUCTION_MODES
from trajectory_planner import aabb_in_workspace, object_aabb


def validate_sim_config(config):
    """Validate engine settings and return any errors found"""
    errors = []

    if config.n_grid < 8:
        errors.append("Grid resolution must be at least 8 cells per axis")

    if not config.domain_size > 0:
        errors.append("Domain size must be positive")

    if not config.dt > 0:
        errors.append("Timestep must be positive")

    if not config.dt_acc >= config.dt:
        errors.append("Force window dt_acc must be at least one timestep")
    elif abs(config.acc_steps * config.dt - config.dt_acc) > 1e-9 * config.dt_acc:
        errors.append("Force window dt_acc must be a whole number of timesteps")

    if not 0 < config.J_min < 1 < config.J_max:
        errors.append("Determinant bounds must satisfy 0 < J_min < 1 < J_max")

    if config.j_clamp_mode not in J_CLAMP_MODES:
        errors.append(f"J clamp mode must be one of {', '.join(J_CLAMP_MODES)}")

    if config.reduction not in REDUCTION_MODES:
        errors.append(f"Reduction mode must be one of {', '.join(REDUCTION_MODES)}")

    if config.damping_grid < 0 or config.damping_particle < 0:
        errors.append("Damping rates cannot be negative")

    if not 0 < config.cfl_factor <= 1:
        errors.append("CFL factor must lie in (0, 1]")

    if config.grid_speed_cap is not None and config.grid_speed_cap < 0:
        errors.append("Grid speed cap cannot be negative")

    if config.hardening < 0 or config.perzyna_relaxation < 0:
        errors.append("Hardening modulus and relaxation time cannot be negative")

    if not config.max_time > 0:
        errors.append("Episode time limit must be positive")

    for name in ("dx_ref", "band0", "gamma", "v_hat"):
        if not getattr(config, name) > 0:
            errors.append(f"Threshold scaling parameter {name} must be positive")

    if not 0 <= config.c_min <= 1:
        errors.append("Contact strength floor c_min must lie in [0, 1]")

    return errors


def validate_material(material):
    """Validate one material and return any errors found"""
    errors = []
    label = material.name

    if not material.rho > 0:
        errors.append(f"Material {label}: density must be positive")

    if not material.E > 0:
        errors.append(f"Material {label}: Young's modulus must be positive")

    if not -1 < material.nu < 0.5:
        errors.append(f"Material {label}: Poisson ratio must lie in (-1, 0.5)")

    if not material.sigma_y > 0:
        errors.append(f"Material {label}: yield stress must be positive (use inf for purely elastic)")

    if material.k2_ref < 0:
        errors.append(f"Material {label}: resistance coefficient cannot be negative")

    return errors


def validate_cutting(params):
    """Validate cutting-model switches and return any errors found"""
    errors = []

    if params.damage_mode not in DAMAGE_MODES:
        errors.append(f"Damage mode must be one of {', '.join(DAMAGE_MODES)}")

    if not params.damage_rate > 0:
        errors.append("Damage rate must be positive")

    if not 0 < params.eps_soft <= 1:
        errors.append("Residual stiffness eps_soft must lie in (0, 1]")

    if not 0 <= params.speed_floor <= 1:
        errors.append("Knife speed floor must lie in [0, 1]")

    if not 0 < params.damage_cut <= 1:
        errors.append("Damage cut-off must lie in (0, 1]")

    if not params.link_radius_cells > 0:
        errors.append("Segmentation link radius must be positive")

    if params.tip_force < 0:
        errors.append("Tip force cannot be negative")

    if params.segment_every < 0:
        errors.append("Segmentation cadence cannot be negative")

    return errors


def validate_task(task):
    """Validate a cutting task and return any errors found"""
    errors = []

    if task.style not in CUT_STYLES:
        errors.append(f"Cut style must be one of {', '.join(CUT_STYLES)}")

    if not task.h > 0:
        errors.append("Cut start height must be positive")

    if not task.v > 0:
        errors.append("Approach speed must be positive")

    return errors


def validate_scene(scene, config):
    """Validate a scene against the simulation domain and return any errors found"""
    errors = validate_material(scene.material)

    if not scene.scale > 0:
        errors.append("Object scale must be positive")
    elif not aabb_in_workspace(object_aabb(scene), config):
        errors.append(f"Object {scene.kind} at {tuple(scene.position)} does not fit inside the workspace")

    if not np.isfinite(scene.rotation):
        errors.append("Object rotation must be finite")

    return errors


def validate_safety(settings):
    """Validate safety-module settings and return any errors found"""
    errors = []

    if not settings.F_max > 0:
        errors.append("Force limit F_max must be positive")

    if settings.kind not in FORCE_MODEL_KINDS:
        errors.append(f"Force model must be one of {', '.join(FORCE_MODEL_KINDS)}")

    return errors
