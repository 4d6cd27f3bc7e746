#!/usr/bin/env python3
"""
Run Configuration Manager
Loads, validates and saves replay configurations (JSON), merged over the
defaults in config.py
"""
import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional

import config
from services.crf_regularizer import CrfConfig
from services.instance_tracker import TrackingConfig
from services.panoptic_evaluator import EvaluationConfig
from services.tsdf_integrator import IntegrationConfig
from utils.errors import ConfigError, PanopticError


@dataclass
class MapConfig:
    voxel_size: float = config.MAP_CONFIG["voxel_size"]
    block_side: int = config.MAP_CONFIG["block_side"]

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise ConfigError("map.voxel_size must be positive")
        if self.block_side < 1:
            raise ConfigError("map.block_side must be at least 1")


@dataclass
class MeshConfig:
    min_corner_weight: float = config.MESH_CONFIG["min_corner_weight"]

    def __post_init__(self):
        if self.min_corner_weight < 0:
            raise ConfigError("meshing.min_corner_weight must be non-negative")


@dataclass
class ScheduleConfig:
    regularize_every: int = config.SCHEDULE_CONFIG["regularize_every"]
    mesh_every: int = config.SCHEDULE_CONFIG["mesh_every"]
    final_regularization: bool = config.SCHEDULE_CONFIG["final_regularization"]
    enable_crf: bool = config.SCHEDULE_CONFIG["enable_crf"]

    def __post_init__(self):
        if self.regularize_every < 0 or self.mesh_every < 0:
            raise ConfigError("schedule intervals must be non-negative (0 disables)")


SECTION_TYPES = {
    "map": MapConfig,
    "integration": IntegrationConfig,
    "tracking": TrackingConfig,
    "crf": CrfConfig,
    "meshing": MeshConfig,
    "evaluation": EvaluationConfig,
    "schedule": ScheduleConfig,
}
TOP_LEVEL_KEYS = {"dataset", "output_dir", "seed", "max_frames"} | set(SECTION_TYPES)


def _default_section(name: str):
    return SECTION_TYPES[name](**config.get_default_sections()[name])


@dataclass
class RunConfig:
    dataset: str = ""
    output_dir: str = "out"
    seed: Optional[int] = None          # noise seed for scene-file datasets; None keeps the scene's
    max_frames: Optional[int] = None
    map: MapConfig = field(default_factory=lambda: _default_section("map"))
    integration: IntegrationConfig = field(default_factory=lambda: _default_section("integration"))
    tracking: TrackingConfig = field(default_factory=lambda: _default_section("tracking"))
    crf: CrfConfig = field(default_factory=lambda: _default_section("crf"))
    meshing: MeshConfig = field(default_factory=lambda: _default_section("meshing"))
    evaluation: EvaluationConfig = field(default_factory=lambda: _default_section("evaluation"))
    schedule: ScheduleConfig = field(default_factory=lambda: _default_section("schedule"))

    def to_dict(self) -> Dict:
        return asdict(self)


def _check_value(where: str, value: Any, default: Any):
    """Type check a value against the type of its default"""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif default is None:
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: unexpected value {value!r}")


def _build_section(name: str, values: Any):
    section_type = SECTION_TYPES[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section '{name}' must be an object")
    defaults = config.get_default_sections()[name]
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {', '.join(unknown)}")
    for key, value in values.items():
        _check_value(f"{name}.{key}", value, defaults[key])
    try:
        return section_type(**{**defaults, **values})
    except PanopticError as e:
        raise ConfigError(f"section '{name}': {e}") from e


class RunConfigManager:
    """Load and save run configurations with full validation"""

    def from_dict(self, data: Dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        unknown = sorted(set(data) - TOP_LEVEL_KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        cfg = RunConfig()
        for key in ("dataset", "output_dir"):
            if key in data:
                _check_value(key, data[key], "")
                setattr(cfg, key, data[key])
        if data.get("seed") is not None:
            _check_value("seed", data["seed"], 0)
            if data["seed"] < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = data["seed"]
        if data.get("max_frames") is not None:
            _check_value("max_frames", data["max_frames"], 0)
            if data["max_frames"] < 0:
                raise ConfigError("max_frames must be non-negative")
            cfg.max_frames = data["max_frames"]
        for name in SECTION_TYPES:
            if name in data:
                setattr(cfg, name, _build_section(name, data[name]))
        return cfg

    def load_config(self, path: str) -> RunConfig:
        """Load configuration file"""
        if not os.path.exists(path):
            raise ConfigError(f"configuration file {path} not found")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
        cfg = self.from_dict(data)
        # dataset is relative to the config file, output_dir to the working directory
        if cfg.dataset and not os.path.isabs(cfg.dataset):
            cfg.dataset = os.path.normpath(str(Path(path).parent / cfg.dataset))
        return cfg

    def save_config(self, cfg: RunConfig, path: str):
        """Save configuration file"""
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def apply_overrides(self, cfg: RunConfig, dataset: Optional[str] = None, output_dir: Optional[str] = None,
                        seed: Optional[int] = None, frames: Optional[int] = None,
                        no_crf: bool = False, max_blocks: Optional[int] = None) -> RunConfig:
        """Command-line flags take precedence over file values"""
        updated = replace(cfg)
        if dataset is not None:
            updated.dataset = dataset
        if output_dir is not None:
            updated.output_dir = output_dir
        if seed is not None:
            updated.seed = seed
        if frames is not None:
            if frames < 0:
                raise ConfigError("--frames must be non-negative")
            updated.max_frames = frames
        if no_crf:
            updated.schedule = replace(cfg.schedule, enable_crf=False)
        if max_blocks is not None:
            if max_blocks < 1:
                raise ConfigError("--max-blocks must be at least 1")
            updated.crf = replace(cfg.crf, max_blocks_per_submap=max_blocks)
        return updated
