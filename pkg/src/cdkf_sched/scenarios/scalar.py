"""Scalar test model: a random walk (or OU process) observed by one sensor, no auxiliary state."""
from __future__ import annotations

import numpy as np

from ..model import AuxModel, ProcessModel, Sensor, TimeGrid
from ..ocp import OcpSpec
from ..simulate import GreedyConfig
from .base import ConfigError, Scenario


def build_scalar_scenario(cfg: dict) -> Scenario:
    a, s2 = float(cfg.get("A", 0.0)), float(cfg["sigma2"])
    c, r = float(cfg.get("C", 1.0)), float(cfg["R"])
    problems = []
    if s2 < 0:
        problems.append("sigma2 must be nonnegative")
    if r <= 0:
        problems.append("R must be positive")
    if problems:
        raise ConfigError(problems)
    process = ProcessModel(n=1, m=1, drift=lambda xi, t: np.array([[a]]),
                           diffusion=lambda xi, t: np.array([[np.sqrt(s2)]]))

    def empty(x, u, t):
        return np.zeros(np.shape(x)[:-1] + (0,))

    aux = AuxModel(n_xi=0, n_p=0, m_u=0, f_p=empty, f_u=empty, convexity_tag="affine")
    sensor = Sensor(id=1, q=1, output=lambda xi, t: np.array([[c]]),
                    noise_cov=lambda xi, t: np.array([[r]]), jump=empty)
    w_S, w_l = cfg["w_Sigma"], cfg["w_lambda"]

    def running_cost(xi, S, u, lam, eps, t):
        return w_S * np.trace(S, axis1=-2, axis2=-1) + w_l * np.sum(lam**2, -1)

    spec = OcpSpec(running_cost=running_cost, u_lower=np.zeros(0), u_upper=np.zeros(0),
                   rate_upper=cfg.get("rate_upper"), weights={"w_Sigma": w_S, "w_lambda": w_l})
    grid = TimeGrid.uniform(0.0, cfg["T"], cfg["N"])
    sigma0 = np.array([[cfg.get("Sigma_0", 1.0)]])
    greedy = GreedyConfig(costs=[cfg.get("greedy_cost_weight", 0.0)])
    return Scenario("scalar", process, aux, [sensor], spec, grid, np.zeros(1), sigma0, np.zeros(0), cfg,
                    {}, greedy, cfg.get("penalty_weight", 1e3))
