"""Shipped experiment models built from declarative JSON configs."""
from __future__ import annotations

from .base import ConfigError, Scenario, load_config, schema, shipped_config_path, validate_config
from .robot import build_robot_scenario
from .scalar import build_scalar_scenario
from .water import build_water_scenario

__all__ = [
    "ConfigError",
    "Scenario",
    "build_robot_scenario",
    "build_scalar_scenario",
    "build_scenario",
    "build_water_scenario",
    "load_config",
    "schema",
    "shipped_config_path",
    "validate_config",
]


def build_scenario(cfg: dict, grid_n: int | None = None) -> Scenario:
    """Dispatch on ``cfg["scenario"]``; ``grid_n`` overrides the node count."""
    if grid_n is not None:
        cfg = dict(cfg, N=int(grid_n))
    kind = cfg.get("scenario")
    if kind == "robot":
        return build_robot_scenario(cfg)
    if kind == "water":
        return build_water_scenario(cfg)
    if kind == "scalar":
        return build_scalar_scenario(cfg)
    raise ConfigError([f"unknown scenario {kind!r}"])
