"""Energy-limited mobile robot measuring a Matern-3/2 process, optionally under radiation damage.

Auxiliary layout: ``xi = [eta, (zeta_1, zeta_2), p_1, p_2, theta]`` with the
energy (and damage) block perturbed by measurements and the unicycle pose
unperturbed. Inputs are ``u = [v, omega]``.
"""
from __future__ import annotations

import numpy as np

from ..kalman import build_kernel_ssm
from ..model import AuxModel, Sensor, TimeGrid
from ..ocp import OcpSpec
from ..simulate import GreedyConfig
from .base import ConfigError, Scenario


def check_orderings(cfg: dict) -> list[str]:
    problems = []
    if not cfg["c_u"] >= cfg["c_1"] >= cfg["c_2"] >= 0:
        problems.append("energy costs must satisfy c_u >= c_1 >= c_2 >= 0")
    if not cfg["R_2max"] > cfg["R_1max"] > 0:
        problems.append("noise levels must satisfy R_2max > R_1max > 0")
    if not cfg["r_2"] > cfg["r_1"] > 0:
        problems.append("noise growth must satisfy r_2 > r_1 > 0")
    if cfg.get("with_radiation", False) and not cfg["gamma_1"] > cfg["gamma_2"] >= 0:
        problems.append("radiation susceptibility must satisfy gamma_1 > gamma_2 >= 0")
    if cfg["c_e"] < 0 or cfg["r_e"] < 0:
        problems.append("charging parameters c_e, r_e must be nonnegative")
    if cfg["c_eta"] < 0:
        problems.append("energy floor c_eta must be nonnegative")
    lo, hi = np.asarray(cfg["u_lower"]), np.asarray(cfg["u_upper"])
    if np.any(lo > hi):
        problems.append("input box must satisfy u_lower <= u_upper")
    return problems


def build_robot_scenario(cfg: dict, with_radiation: bool | None = None) -> Scenario:
    if with_radiation is None:
        with_radiation = bool(cfg.get("with_radiation", False))
    cfg = dict(cfg, with_radiation=with_radiation)
    problems = check_orderings(cfg)
    if problems:
        raise ConfigError(problems)

    c_e, r_e, c_u = cfg["c_e"], cfg["r_e"], cfg["c_u"]
    cost = np.array([cfg["c_1"], cfg["c_2"]])
    Rmax = np.array([cfg["R_1max"], cfg["R_2max"]])
    rr = np.array([cfg["r_1"], cfg["r_2"]])
    gam = np.array([cfg.get("gamma_1", 0.0), cfg.get("gamma_2", 0.0)])
    r_zeta = cfg.get("r_zeta", 0.0)
    p_b = np.asarray(cfg["p_b"], dtype=float)
    p_p = np.asarray(cfg["p_p"], dtype=float)
    n_p = 3 if with_radiation else 1
    ip = n_p  # index of p_1

    def dist2(xi, target):
        return (xi[..., ip] - target[0]) ** 2 + (xi[..., ip + 1] - target[1]) ** 2

    def f_p(xi, u, t):
        deta = c_e * np.exp(-r_e * dist2(xi, p_b)) - c_u * u[..., 0] - c_u * u[..., 1]
        if not with_radiation:
            return deta[..., None]
        z = np.zeros_like(deta)
        return np.stack([deta, z, z], axis=-1)

    def f_u(xu, u, t):
        th = xu[..., 2]
        v, w = u[..., 0], u[..., 1]
        return np.stack([v * np.cos(th), v * np.sin(th), w * np.ones_like(th)], axis=-1)

    names = ["eta"] + (["zeta_1", "zeta_2"] if with_radiation else []) + ["p_1", "p_2", "theta"]
    aux = AuxModel(n_xi=n_p + 3, n_p=n_p, m_u=2, f_p=f_p, f_u=f_u, convexity_tag="affine", names=names)

    process, P_inf, H = build_kernel_ssm("matern32", cfg["lengthscale"], cfg["variance"])

    def make_sensor(j):
        def output(xi, t):
            return H

        def noise(xi, t):
            # far-off trial points overflow to inf noise, i.e. an uninformative sensor
            with np.errstate(over="ignore"):
                r = Rmax[j] * np.exp(rr[j] * dist2(xi, p_p))
                if with_radiation:
                    r = r * np.exp(rr[j] * xi[..., 1 + j])
            return np.asarray(r)[..., None, None]

        def jump(xi, u, t):
            d = -cost[j] * np.ones(np.shape(xi)[:-1])
            if not with_radiation:
                return d[..., None]
            dz = gam[j] * np.exp(-r_zeta * dist2(xi, p_p))
            z = np.zeros_like(d)
            parts = [d, dz, z] if j == 0 else [d, z, dz]
            return np.stack(parts, axis=-1)

        return Sensor(id=j + 1, q=1, output=output, noise_cov=noise, jump=jump)

    sensors = [make_sensor(0), make_sensor(1)]

    w_S, w_l, w_u, w_e = cfg["w_Sigma"], cfg["w_lambda"], cfg["w_u"], cfg["w_eps"]
    c_S = cfg["c_Sigma"]
    floor = cfg["c_eta"] + cfg.get("energy_margin", 0.0)
    t_on = cfg.get("trace_window_start", 0.5)
    tol = cfg.get("terminal_tol", 1e-3)

    def running_cost(xi, S, u, lam, eps, t):
        tr = np.trace(S, axis1=-2, axis2=-1)
        return w_S * tr + w_l * np.sum(lam**2, -1) + w_u * np.sum(u**2, -1) + w_e * np.sum(eps**2, -1)

    def running_constraints(xi, S, u, lam, eps, t):
        tr = np.trace(S, axis1=-2, axis2=-1)
        return np.stack([tr - c_S - eps[..., 0], floor - xi[..., 0]], axis=-1)

    def running_mask(t):
        return np.array([t >= t_on - 1e-12, True])

    def terminal_constraints(xi, S, u, lam, eps, t):
        d = xi[..., ip:ip + 2] - p_b
        return np.concatenate([d - tol, -d - tol], axis=-1)

    spec = OcpSpec(
        running_cost=running_cost,
        u_lower=np.asarray(cfg["u_lower"], dtype=float),
        u_upper=np.asarray(cfg["u_upper"], dtype=float),
        running_constraints=running_constraints,
        n_running=2,
        running_mask=running_mask,
        terminal_constraints=terminal_constraints,
        n_terminal=4,
        rate_upper=cfg.get("rate_upper"),
        slack_dim=1,
        weights={"w_Sigma": w_S, "w_lambda": w_l, "w_u": w_u, "w_eps": w_e},
    )

    grid = TimeGrid.uniform(0.0, cfg["T"], cfg["N"])
    xi0 = np.concatenate([[cfg["eta_0"]], np.zeros(n_p - 1), p_b, [cfg.get("theta_0", 0.0)]])
    mu0 = np.zeros(process.n)
    sigma0 = np.asarray(P_inf, dtype=float)

    signals = {"energy": lambda xi: xi[:, 0]}
    if with_radiation:
        signals["degradation"] = lambda xi: xi[:, 1] + xi[:, 2]

    pen_w = cfg.get("greedy_penalty_weight", 1e3)

    def greedy_penalty(xi_after, t):
        return pen_w * max(0.0, cfg["c_eta"] - float(xi_after[0]))

    greedy = GreedyConfig(costs=cfg.get("greedy_cost_weight", 0.0) * cost, penalty=greedy_penalty,
                          step=cfg.get("greedy_step"))
    name = "robot_radiation" if with_radiation else "robot"
    return Scenario(name, process, aux, sensors, spec, grid, mu0, sigma0, xi0, cfg, signals, greedy,
                    cfg.get("penalty_weight", 1e3))
