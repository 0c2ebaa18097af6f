# utils.py
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from config import DEFAULT_FORCE_MODEL, F_MAX
from contact_sdf import ContactParams
from cutting import CuttingParams
from errors import ConfigError
from mpm_core import Material, SimConfig
from trajectory_planner import CutState, CutTask, SceneSpec, StyleParams
from validation import (
    validate_cutting,
    validate_material,
    validate_safety,
    validate_scene,
    validate_sim_config,
    validate_task,
)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
CONFIG_SECTIONS = ("sim", "cutting", "contact", "materials", "scene", "task", "style", "safety")


def setup_logging(level: str = "INFO") -> None:
    """Configure root logging once for command-line runs.

    Examples
    --------
    >>> setup_logging("DEBUG")
    >>> logging.getLogger().getEffectiveLevel() == logging.DEBUG
    True
    """
    numeric = getattr(logging, str(level).upper(), None)
    if not isinstance(numeric, int):
        raise ConfigError(f"Unknown log level: {level}")
    logging.basicConfig(level=numeric, format=LOG_FORMAT, datefmt="%Y-%m-%d %H:%M:%S", force=True)


@dataclass
class SafetySettings:
    F_max: float = F_MAX
    kind: str = DEFAULT_FORCE_MODEL
    model_path: str | None = None
    enabled: bool = True


@dataclass
class HarnessConfig:
    """All configuration sections of a run, each defaulted from config.py."""

    sim: SimConfig = field(default_factory=SimConfig)
    cutting: CuttingParams = field(default_factory=CuttingParams)
    contact: ContactParams = field(default_factory=ContactParams)
    materials: list[Material] = field(default_factory=list)
    scene: SceneSpec = field(default_factory=SceneSpec)
    task: CutTask = field(default_factory=CutTask)
    style: StyleParams = field(default_factory=StyleParams)
    safety: SafetySettings = field(default_factory=SafetySettings)

    def validate(self) -> list[str]:
        errors = validate_sim_config(self.sim)
        errors += validate_cutting(self.cutting)
        for material in self.materials:
            errors += validate_material(material)
        errors += validate_scene(self.scene, self.sim)
        errors += validate_task(self.task)
        errors += validate_safety(self.safety)
        return errors

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "cutting": self.cutting.to_dict(),
            "contact": asdict(self.contact),
            "materials": [m.to_dict() for m in self.materials],
            "scene": self.scene.to_dict(),
            "task": self.task.to_dict(),
            "style": asdict(self.style),
            "safety": asdict(self.safety),
        }


def _check_keys(cls, data: dict, name: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown keys in section '{name}': {', '.join(unknown)}")
    return dict(data)


def parse_config(data: dict) -> HarnessConfig:
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(unknown)}")
    cfg = HarnessConfig()
    if "sim" in data:
        cfg.sim = SimConfig.from_dict(data["sim"])
    if "cutting" in data:
        cfg.cutting = CuttingParams.from_dict(data["cutting"])
    contact = _check_keys(ContactParams, data.get("contact", {}), "contact")
    cfg.contact = ContactParams(**{"query_aabb_pad": 2.0 * cfg.sim.dx, **contact})
    cfg.materials = [Material.from_dict(_check_keys(Material, m, "materials")) for m in data.get("materials", [])]
    if "scene" in data:
        cfg.scene = SceneSpec.from_dict(_check_keys(SceneSpec, data["scene"], "scene"))
    if cfg.materials:
        cfg.scene = replace(cfg.scene, material=cfg.materials[0])
    if "task" in data:
        task = _check_keys(CutTask, data["task"], "task")
        if isinstance(task.get("state"), dict):
            task["state"] = CutState(**_check_keys(CutState, task["state"], "task.state"))
        cfg.task = CutTask(**task)
    if "style" in data:
        cfg.style = StyleParams.from_dict(_check_keys(StyleParams, data["style"], "style"))
    if "safety" in data:
        cfg.safety = SafetySettings(**_check_keys(SafetySettings, data["safety"], "safety"))
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def load_config(path=None) -> HarnessConfig:
    """Read a JSON config file; ``None`` gives the defaults."""
    if path is None:
        return parse_config({})
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    logging.info(f"Loaded config from {path}")
    return parse_config(data)


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def write_json(data, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, default=_json_default)


def read_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def write_frame(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False)


def read_frame(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


@contextmanager
def atomic_directory(target):
    """Yield a temporary directory that replaces ``target`` on success."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}-", dir=target.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if target.exists():
        shutil.rmtree(target)
    try:
        os.replace(tmp, target)
    except OSError:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def spawn_seeds(seed: int, n: int) -> list[int]:
    """Independent child seeds derived from one root seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def spawn_generators(entropy, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(entropy).spawn(n)]
