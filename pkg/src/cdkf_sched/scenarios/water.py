"""Water-quality monitoring with two fouling sensors and active defouling inputs.

The monitored quantity is an Ornstein-Uhlenbeck process reverting to the
ambient level. ``xi = [fouling_1, fouling_2]`` (both perturbed), ``u = [u_1, u_2]``
are the defouling efforts.
"""
from __future__ import annotations

import numpy as np

from ..model import AuxModel, ProcessModel, Sensor, TimeGrid
from ..ocp import OcpSpec
from ..simulate import GreedyConfig
from .base import ConfigError, Scenario


def check_orderings(cfg: dict) -> list[str]:
    problems = []
    if not cfg["R_10"] > cfg["R_20"] > 0:
        problems.append("noise levels must satisfy R_10 > R_20 > 0")
    if not cfg["rho_2f"] > cfg["rho_1f"] > 0:
        problems.append("fouling increments must satisfy rho_2f > rho_1f > 0")
    for k in ("kappa", "sigma", "alpha_f", "gamma_f", "c_xi", "lambda_1f", "lambda_2f"):
        if cfg[k] <= 0:
            problems.append(f"{k} must be positive")
    lo, hi = np.asarray(cfg["u_lower"]), np.asarray(cfg["u_upper"])
    if np.any(lo > hi):
        problems.append("input box must satisfy u_lower <= u_upper")
    return problems


def build_water_scenario(cfg: dict) -> Scenario:
    problems = check_orderings(cfg)
    if problems:
        raise ConfigError(problems)
    kappa, x_amb, sig = cfg["kappa"], cfg["x_amb"], cfg["sigma"]
    R0 = np.array([cfg["R_10"], cfg["R_20"]])
    lam_f = np.array([cfg["lambda_1f"], cfg["lambda_2f"]])
    rho = np.array([cfg["rho_1f"], cfg["rho_2f"]])
    alpha, gamma = cfg["alpha_f"], cfg["gamma_f"]

    A = np.array([[-kappa]])
    L = np.array([[sig]])
    process = ProcessModel(n=1, m=1, drift=lambda xi, t: A, diffusion=lambda xi, t: L,
                           bias=lambda xi, t: np.array([kappa * x_amb]))

    def f_p(xi, u, t):
        return -(alpha + gamma * u) * xi

    def f_u(xu, u, t):
        return np.zeros(np.shape(xu)[:-1] + (0,))

    aux = AuxModel(n_xi=2, n_p=2, m_u=2, f_p=f_p, f_u=f_u, convexity_tag="affine",
                   names=["fouling_1", "fouling_2"])

    def make_sensor(j):
        def noise(xi, t):
            return (R0[j] * np.exp(lam_f[j] * xi[..., j]))[..., None, None]

        def jump(xi, u, t):
            e = np.zeros(2)
            e[j] = rho[j]
            return np.broadcast_to(e, np.shape(xi)[:-1] + (2,))

        return Sensor(id=j + 1, q=1, output=lambda xi, t: np.array([[1.0]]), noise_cov=noise, jump=jump)

    sensors = [make_sensor(0), make_sensor(1)]
    w_S, w_l, w_u = cfg["w_Sigma"], cfg["w_lambda"], cfg["w_u"]
    c_xi = cfg["c_xi"]

    def running_cost(xi, S, u, lam, eps, t):
        return w_S * np.trace(S, axis1=-2, axis2=-1) + w_l * np.sum(lam**2, -1) + w_u * np.sum(u**2, -1)

    def running_constraints(xi, S, u, lam, eps, t):
        return xi[..., :2] - c_xi

    spec = OcpSpec(
        running_cost=running_cost,
        u_lower=np.asarray(cfg["u_lower"], dtype=float),
        u_upper=np.asarray(cfg["u_upper"], dtype=float),
        running_constraints=running_constraints,
        n_running=2,
        rate_upper=cfg.get("rate_upper"),
        weights={"w_Sigma": w_S, "w_lambda": w_l, "w_u": w_u},
    )
    grid = TimeGrid.uniform(0.0, cfg["T"], cfg["N"])
    mu0 = np.array([cfg.get("mu_0", x_amb)])
    sigma0 = np.array([[cfg.get("Sigma_0", sig**2 / (2 * kappa))]])
    xi0 = np.asarray(cfg.get("xi_0", [0.0, 0.0]), dtype=float)
    signals = {"fouling": lambda xi: xi[:, 0] + xi[:, 1]}
    pen_w = cfg.get("greedy_penalty_weight", 1e3)

    def greedy_penalty(xi_after, t):
        return pen_w * float(np.sum(np.maximum(0.0, xi_after[:2] - c_xi)))

    greedy = GreedyConfig(costs=cfg.get("greedy_cost_weight", 0.0) * rho, penalty=greedy_penalty,
                          step=cfg.get("greedy_step"))
    return Scenario("water", process, aux, sensors, spec, grid, mu0, sigma0, xi0, cfg, signals, greedy,
                    cfg.get("penalty_weight", 1e3))
