"""End-to-end workflows shared by the command line and the tests.

Seed layout: truth noise for replication ``r`` uses stream ``1000 + r`` for
every method so the methods see identical process and measurement noise;
Random schedules use ``2000 + r`` and M-Optimized draws use ``3000 + r``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .auglag import SolverOptions
from .kalman import filter_pass, rts_smooth
from .model import GaussianBelief, RatePlan, Schedule
from .ocp import OcpSolution, solve_nlp, transcribe
from .quantize import schedule_from_plan
from .scenarios import Scenario
from .simulate import (
    RngStream,
    TruthResult,
    evaluate_run,
    greedy_schedule,
    m_optimized_schedule,
    monte_carlo_bound_check,
    random_schedule,
    schedule_bound_trajectory,
    simulate_truth,
)

METHODS = ("Optimized", "M-Optimized", "Greedy", "Random")
TRUTH_STREAM, RANDOM_STREAM, MOPT_STREAM = 1000, 2000, 3000


def plan(scenario: Scenario, opts: Optional[SolverOptions] = None) -> OcpSolution:
    """Transcribe and solve the scenario's scheduling problem."""
    nlp = transcribe(scenario.spec, scenario.process, scenario.aux, scenario.sensors, scenario.grid,
                     scenario.sigma0, scenario.xi0)
    return solve_nlp(nlp, opts=opts or scenario.solver_options)


def zero_inputs(scenario: Scenario) -> np.ndarray:
    return np.zeros((len(scenario.grid) - 1, scenario.aux.m_u))


def penalized_cost(scenario: Scenario, sigma_nodes, xi_nodes, input_plan) -> float:
    """Trapezoid running cost (rates and slack at zero) plus squared constraint violations.

    Used to rank schedules: ``penalty_weight * sum(max(0, c)^2)`` is added for
    every flagged running constraint and for the terminal constraints.
    """
    spec, grid = scenario.spec, scenario.grid
    N = len(grid)
    U = np.asarray(input_plan, dtype=float).reshape(N - 1, -1)
    u = np.vstack([U, U[-1:]]) if U.size else np.zeros((N, 0))
    lam = np.zeros((N, len(scenario.sensors)))
    eps = np.zeros((N, spec.slack_dim))
    t = grid.nodes
    h = grid.steps
    w = np.zeros(N)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    vals = np.array([spec.running_cost(xi_nodes[k], sigma_nodes[k], u[k], lam[k], eps[k], t[k])
                     for k in range(N)], dtype=float)
    cost = float(w @ vals)
    viol = 0.0
    if spec.running_constraints is not None and spec.n_running:
        for k in range(N):
            c = np.asarray(spec.running_constraints(xi_nodes[k], sigma_nodes[k], u[k], lam[k], eps[k], t[k]))
            if spec.running_mask is not None:
                c = c[np.broadcast_to(spec.running_mask(t[k]), c.shape)]
            viol += float(np.sum(np.maximum(c, 0.0) ** 2))
    if spec.terminal_constraints is not None:
        c = np.asarray(spec.terminal_constraints(xi_nodes[-1], sigma_nodes[-1], u[-1], lam[-1], eps[-1], t[-1]))
        viol += float(np.sum(np.maximum(c, 0.0) ** 2))
    if spec.terminal_cost is not None:
        cost += float(spec.terminal_cost(xi_nodes[-1], sigma_nodes[-1], u[-1], lam[-1], eps[-1], t[-1]))
    return cost + scenario.penalty_weight * viol


def schedule_cost(scenario: Scenario, schedule: Schedule, input_plan) -> float:
    """Penalized cost of a fixed schedule along its deterministic bound trajectory."""
    S, X = schedule_bound_trajectory(scenario.process, scenario.aux, scenario.sensors, schedule, input_plan,
                                     scenario.grid, scenario.sigma0, scenario.xi0)
    return penalized_cost(scenario, S, X, input_plan)


def simulate(scenario: Scenario, schedule: Schedule, input_plan, seed: int, stream: int = TRUTH_STREAM
             ) -> TruthResult:
    return simulate_truth(scenario.process, scenario.aux, scenario.sensors, schedule, input_plan,
                          RngStream(seed, stream), grid=scenario.grid, mu0=scenario.mu0,
                          sigma0=scenario.sigma0, xi0=scenario.xi0)


def filter_and_smooth(scenario: Scenario, truth: TruthResult):
    """Run the CD-KF on the simulated measurements and smooth the result."""
    aux_traj = truth.aux_path()
    prior = GaussianBelief(scenario.mu0, scenario.sigma0)
    traj = filter_pass(scenario.process, scenario.sensors, aux_traj, truth.schedule, truth.measurements,
                       prior, scenario.grid)
    return traj, rts_smooth(traj, scenario.process, aux_traj)


def run_signals(scenario: Scenario, truth: TruthResult) -> dict[str, np.ndarray]:
    """Signals recorded on the fine simulation grid (settled values after any event)."""
    rows = truth.fine_rows
    out = {"trace": truth.trace()[rows]}
    xi = truth.xi[rows]
    for name, fn in scenario.signals.items():
        out[name] = np.asarray(fn(xi), dtype=float)
    return out


def verify(scenario: Scenario, rate_plan: RatePlan, input_plan, replications: int, seed: int):
    return monte_carlo_bound_check(scenario.process, scenario.aux, scenario.sensors, rate_plan, input_plan,
                                   replications, RngStream(seed, 0), scenario.grid, scenario.sigma0,
                                   scenario.xi0)


@dataclass
class Comparison:
    stats: dict  # method -> signal -> RunStats over all pooled replications
    per_rep: dict  # method -> list of signal dicts
    schedules: dict  # method -> list of Schedule (one per replication)

    def rows(self):
        """Table rows ``(method, signal, mean, std, max, min)``."""
        out = []
        for m in self.stats:
            for sig, st in self.stats[m].items():
                out.append((m, sig, st.mean, st.std, st.max, st.min))
        return out


def compare_methods(scenario: Scenario, solution: OcpSolution, replications: int, seed: int,
                    methods=METHODS) -> Comparison:
    """Simulate every method on identical truth-noise streams and pool the trajectory statistics."""
    cfg = scenario.config
    inputs = solution.input_plan
    fixed: Mapping[str, Schedule] = {}
    if "Optimized" in methods:
        fixed["Optimized"] = schedule_from_plan(solution.rate_plan)
    if "Greedy" in methods:
        fixed["Greedy"] = greedy_schedule(scenario.process, scenario.aux, scenario.sensors, scenario.grid,
                                          scenario.greedy, inputs, scenario.sigma0, scenario.xi0)
    K = int(cfg.get("m_optimized_K", 10))
    per_horizon = bool(cfg.get("random_rate_per_horizon", True))

    per_rep = {m: [] for m in methods}
    schedules = {m: [] for m in methods}
    for r in range(replications):
        for m in methods:
            if m in fixed:
                sched = fixed[m]
            elif m == "Random":
                sched = random_schedule(scenario.sensors, scenario.grid, len(scenario.grid),
                                        RngStream(seed, RANDOM_STREAM + r), per_horizon=per_horizon)
            elif m == "M-Optimized":
                sched = m_optimized_schedule(solution.rate_plan, inputs, K,
                                             lambda s, u: schedule_cost(scenario, s, u),
                                             RngStream(seed, MOPT_STREAM + r))
            else:
                raise ValueError(f"unknown method {m!r}")
            truth = simulate(scenario, sched, inputs, seed, TRUTH_STREAM + r)
            per_rep[m].append(run_signals(scenario, truth))
            schedules[m].append(sched)
    stats = {}
    for m in methods:
        names = per_rep[m][0].keys() if per_rep[m] else ()
        stats[m] = evaluate_run({k: np.concatenate([d[k] for d in per_rep[m]]) for k in names})
    return Comparison(stats, per_rep, schedules)


def dense_gp_posterior(kernel, times, y, noise_var):
    """Exact GP posterior mean and variance at the training inputs."""
    t = np.asarray(times, dtype=float)
    K = kernel(t[:, None] - t[None, :])
    G = K + noise_var * np.eye(t.size)
    cf = np.linalg.cholesky(G)
    alpha = np.linalg.solve(cf.T, np.linalg.solve(cf, y))
    V = np.linalg.solve(cf, K)
    return K @ alpha, np.diag(K) - np.sum(V * V, axis=0)


def gp_demo(kind: str = "matern32", n: int = 15, lengthscale: float = 0.7, variance: float = 1.3,
            noise_var: float = 0.1, seed: int = 0, step: float = 1e-3) -> dict:
    """Compare the state-space smoother with the dense GP posterior on random data."""
    from .kalman import build_kernel_ssm, kernel_function
    from .model import Sensor, TimeGrid

    gen = RngStream(seed, 0).generator()
    times = np.sort(gen.uniform(0.0, 3.0, n))
    y = gen.normal(size=n)
    process, P_inf, H = build_kernel_ssm(kind, lengthscale, variance)

    def empty(x, u, t):
        return np.zeros(np.shape(x)[:-1] + (0,))

    sensor = Sensor(id=1, q=1, output=lambda xi, t: H, noise_cov=lambda xi, t: np.array([[noise_var]]),
                    jump=empty)
    grid = TimeGrid(times)
    traj = filter_pass(process, [sensor], lambda t: np.zeros(0), Schedule((times,)), [y],
                       GaussianBelief(np.zeros(process.n), P_inf), grid, step=step)
    sm = rts_smooth(traj, process, lambda t: np.zeros(0), step=step)
    idx = np.searchsorted(sm.times, times)
    m_ss = sm.means[idx] @ H.T
    v_ss = np.einsum("ij,kjl,il->k", H, sm.covs[idx], H)
    m_gp, v_gp = dense_gp_posterior(kernel_function(kind, lengthscale, variance), times, y, noise_var)
    return {
        "kernel": kind,
        "measurements": int(n),
        "max_mean_deviation": float(np.abs(m_ss.ravel() - m_gp).max()),
        "max_variance_deviation": float(np.abs(v_ss - v_gp).max()),
    }
