"""Scenario bundle, config loading and validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import jsonschema
import numpy as np

from ..auglag import SolverOptions
from ..model import AuxModel, ProcessModel, TimeGrid
from ..ocp import OcpSpec
from ..simulate import GreedyConfig


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario config:\n  " + "\n  ".join(self.problems))


@dataclass
class Scenario:
    name: str
    process: ProcessModel
    aux: AuxModel
    sensors: list
    spec: OcpSpec
    grid: TimeGrid
    mu0: np.ndarray
    sigma0: np.ndarray
    xi0: np.ndarray
    config: dict
    signals: Mapping[str, Callable] = field(default_factory=dict)  # name -> f(xi rows) -> values
    greedy: Optional[GreedyConfig] = None
    penalty_weight: float = 1e3

    @property
    def solver_options(self) -> SolverOptions:
        return SolverOptions.from_mapping(self.config)

    def nominal_aux(self, u=None):
        """Jump-free auxiliary trajectory under constant input ``u`` (for model validation)."""
        u = np.zeros(self.aux.m_u) if u is None else np.asarray(u, dtype=float)
        nodes = self.grid.nodes
        xi = np.empty((nodes.size, self.aux.n_xi))
        xi[0] = self.xi0
        for k in range(nodes.size - 1):
            fp, fu = self.aux.rhs(xi[k], u, nodes[k])
            xi[k + 1] = xi[k] + (nodes[k + 1] - nodes[k]) * np.concatenate([fp, fu])
        return lambda t: xi[int(np.argmin(np.abs(nodes - t)))]


def schema() -> dict:
    text = resources.files("cdkf_sched.scenarios").joinpath("configs/schema.json").read_text()
    return json.loads(text)


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("cdkf_sched.scenarios").joinpath(f"configs/{name}.json")))


def load_config(path_or_name) -> dict:
    """Read a config file (or a shipped config by name) and validate it against the schema."""
    p = Path(path_or_name)
    if not p.suffix and not p.exists():
        p = shipped_config_path(str(path_or_name))
    try:
        cfg = json.loads(p.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"cannot read {p}: {exc}"]) from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema())
    problems = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}"
                for e in sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.path)))]
    if problems:
        raise ConfigError(problems)
