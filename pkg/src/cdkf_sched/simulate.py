"""Stochastic ground truth, Monte Carlo verification of the bounds, and baseline schedulers."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .bounds import aux_rhs_batch, propagate_bounds, sigma_rhs_batch
from .kalman import IntegrationDiverged, covariance_rhs, gain_batch, update_cov
from .model import AuxModel, ProcessModel, RatePlan, Schedule, Sensor, TimeGrid, symmetrize
from .quantize import IntensityProfile

__all__ = [
    "AuxPath",
    "BoundCheckReport",
    "GreedyConfig",
    "PreconditionError",
    "RngStream",
    "RunStats",
    "TruthResult",
    "evaluate_run",
    "greedy_schedule",
    "m_optimized_schedule",
    "monte_carlo_bound_check",
    "random_schedule",
    "sample_poisson_times",
    "sample_schedule",
    "schedule_bound_trajectory",
    "simulate_truth",
]

DEFAULT_SUBSTEPS = 20


class PreconditionError(ValueError):
    """The model violates an assumption required by the requested check."""


@dataclass(frozen=True)
class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``."""

    seed: int
    stream_id: int = 0
    path: tuple = ()

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,) + self.path)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, i: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.path + (int(i),))


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError("rng must be an RngStream or a numpy Generator")


# -- Poisson sampling ---------------------------------------------------------

def sample_poisson_times(profile: IntensityProfile, rng) -> np.ndarray:
    """Thinning: homogeneous candidates at the peak rate, kept with probability ``rate / peak``."""
    gen = _gen(rng)
    lam_max = profile.max_rate
    grid = profile.grid
    if lam_max <= 0:
        return np.empty(0)
    span = grid.tf - grid.t0
    k = gen.poisson(lam_max * span)
    cand = np.sort(grid.t0 + span * gen.random(k))
    keep = gen.random(k) * lam_max < profile.rate_at(cand)
    return np.unique(cand[keep])


def sample_schedule(plan: RatePlan, rng) -> Schedule:
    gen = _gen(rng)
    return Schedule(tuple(sample_poisson_times(IntensityProfile.from_plan(plan, s + 1), gen)
                          for s in range(plan.n_sensors)))


# -- event-driven propagation ---------------------------------------------------

def _fine_stops(grid: TimeGrid, step: Optional[float]) -> np.ndarray:
    pieces = [grid.nodes[:1]]
    for a, b in zip(grid.nodes[:-1], grid.nodes[1:]):
        k = DEFAULT_SUBSTEPS if step is None else max(1, math.ceil((b - a) / step - 1e-9))
        pieces.append(np.linspace(a, b, k + 1)[1:])
    return np.concatenate(pieces)


def _input_at(U, grid, t):
    return U[grid.interval_index(t)]


@dataclass
class TruthResult:
    """One simulated path. Rows are duplicated at events: the pre-event row, then one row per update."""

    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    sigma: np.ndarray
    event_sensor: np.ndarray  # 0 for plain rows, sensor id for post-update rows
    schedule: Schedule
    measurements: tuple
    fine_rows: np.ndarray  # index of the settled row at every fine-grid time

    def trace(self) -> np.ndarray:
        return np.trace(self.sigma, axis1=1, axis2=2)

    def aux_path(self) -> "AuxPath":
        return AuxPath(self.t, self.xi, self.event_sensor)


class AuxPath:
    """Piecewise-linear interpolation of a simulated auxiliary path.

    At an event time it returns the pre-jump value, which is what the sensor
    model saw when the measurement was taken.
    """

    def __init__(self, t, xi, event_sensor):
        pre = np.asarray(event_sensor) == 0
        self.t = np.asarray(t)[pre]
        self.xi = np.asarray(xi)[pre]

    def __call__(self, t):
        t = float(t)
        i = np.searchsorted(self.t, t, side="left")
        if i < self.t.size and self.t[i] == t:
            return self.xi[i].copy()
        i = int(np.clip(i, 1, self.t.size - 1))
        t0, t1 = self.t[i - 1], self.t[i]
        w = (t - t0) / (t1 - t0)
        return (1 - w) * self.xi[i - 1] + w * self.xi[i]


def _event_driven(process, aux, sensors, schedule, input_plan, grid, sigma0, xi0,
                  step=None, gen=None, mu0=None):
    """Shared sequential engine; simulates ``x`` and measurements only when ``gen`` is given."""
    n = process.n
    by_id = {s.id: s for s in sensors}
    U = np.asarray(input_plan, dtype=float).reshape(len(grid) - 1, aux.m_u)
    if not schedule.within(grid):
        raise ValueError("schedule has events outside the horizon")
    events = schedule.events()
    fine = _fine_stops(grid, step)
    stops = np.union1d(fine, [e[0] for e in events])
    fine_set = set(fine.tolist())

    P = symmetrize(np.atleast_2d(np.asarray(sigma0, dtype=float)))
    xi = np.asarray(xi0, dtype=float).reshape(aux.n_xi).copy()
    simulate_x = gen is not None
    if simulate_x:
        mu0 = np.zeros(n) if mu0 is None else np.asarray(mu0, dtype=float).reshape(n)
        w, V = np.linalg.eigh(P)
        x = mu0 + V @ (np.sqrt(np.maximum(w, 0.0)) * gen.standard_normal(n))
    else:
        x = np.zeros(n)
    nP = n * n
    ts, xs, xis, sigs, tags, fine_rows = [], [], [], [], [], []
    meas = {s.id: [] for s in sensors}
    ei = 0

    def record(t, tag):
        ts.append(t)
        xs.append(x.copy())
        xis.append(xi.copy())
        sigs.append(P.copy())
        tags.append(tag)

    t_prev = float(stops[0])
    for t in stops:
        t = float(t)
        h = t - t_prev
        if h > 0:
            u = _input_at(U, grid, t_prev)
            if simulate_x:
                A = process.A(xi, t_prev)
                sig = process.sigma(xi, t_prev)
                dw = math.sqrt(h) * gen.standard_normal(process.m)
                x = x + h * (A @ x + process.b(xi, t_prev)) + sig @ dw

            def rhs(tt, y):
                S = y[:nP].reshape(n, n)
                z = y[nP:]
                dS = covariance_rhs(process.A(z, tt), process.sigma(z, tt), S)
                fp, fu = aux.rhs(z, u, tt)
                return np.concatenate([dS.ravel(), fp, fu])

            y = np.concatenate([P.ravel(), xi])
            k1 = rhs(t_prev, y)
            k2 = rhs(t_prev + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(t_prev + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(t, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
                raise IntegrationDiverged(t, "truth")
            P = symmetrize(y[:nP].reshape(n, n))
            xi = y[nP:].copy()
        record(t, 0)
        while ei < len(events) and events[ei][0] == t:
            sid = events[ei][1]
            s = by_id[sid]
            u = _input_at(U, grid, t)
            C = s.C(xi, t, n)
            R = s.R(xi, t)
            if simulate_x:
                v = np.linalg.cholesky(R) @ gen.standard_normal(s.q)
                meas[sid].append(C @ x + v)
            _, P = update_cov(P, C, R)
            jump = s.g(xi, u, t, aux.n_p)
            xi[:aux.n_p] += jump
            record(t, sid)
            ei += 1
        if t in fine_set:
            fine_rows.append(len(ts) - 1)
        t_prev = t

    measurements = tuple(np.array(meas[s.id]).reshape(-1, s.q) for s in sorted(sensors, key=lambda s: s.id))
    return TruthResult(np.array(ts), np.array(xs), np.array(xis), np.array(sigs), np.array(tags),
                       schedule, measurements, np.array(fine_rows))


def simulate_truth(process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor], schedule: Schedule,
                   input_plan, rng, step: Optional[float] = None, *, grid: TimeGrid, mu0, sigma0,
                   xi0) -> TruthResult:
    """Simulate the state, the measurements, the auxiliary state and the filter covariance.

    ``x`` follows Euler-Maruyama; ``(Sigma, xi)`` follow RK4 between events and
    jump at events. ``step`` defaults to one twentieth of the grid spacing.
    """
    return _event_driven(process, aux, sensors, schedule, input_plan, grid, sigma0, xi0,
                         step=step, gen=_gen(rng), mu0=mu0)


def schedule_bound_trajectory(process, aux, sensors, schedule, input_plan, grid, sigma0, xi0,
                              step: Optional[float] = None):
    """Deterministic covariance and auxiliary paths for a fixed schedule, sampled at the grid nodes."""
    res = _event_driven(process, aux, sensors, schedule, input_plan, grid, sigma0, xi0, step=step)
    node_rows = []
    for tn in grid.nodes:
        idx = np.nonzero(res.t == tn)[0]
        node_rows.append(idx[-1])
    node_rows = np.array(node_rows)
    return res.sigma[node_rows], res.xi[node_rows]


# -- Monte Carlo check ------------------------------------------------------------

def _check_precondition(process, aux, sensors, xi_nodes, grid, u_nodes):
    if aux.n_p == 0:
        return
    rng = np.random.default_rng(12345)
    n = process.n
    for xi, t in zip(xi_nodes, grid.nodes):
        for scale in (1.0, 10.0):
            alt = xi.copy()
            alt[:aux.n_p] += scale * rng.standard_normal(aux.n_p)
            pairs = [("drift", process.A(xi, t), process.A(alt, t)),
                     ("diffusion", process.sigma(xi, t), process.sigma(alt, t))]
            for s in sensors:
                pairs.append((f"sensor {s.id} output", s.C(xi, t, n), s.C(alt, t, n)))
                pairs.append((f"sensor {s.id} noise", s.R(xi, t), s.R(alt, t)))
            for label, a, b in pairs:
                if not np.allclose(a, b, rtol=1e-12, atol=1e-14):
                    raise PreconditionError(
                        f"{label} depends on the perturbed auxiliary state (t={t:g}); "
                        "the mean covariance is then not the conditional one and the check does not apply")


@dataclass
class BoundCheckReport:
    times: np.ndarray
    min_eig: np.ndarray  # min eigenvalue of Sigma_hat - mean(Sigma) per node
    cov_se: np.ndarray
    cov_threshold: np.ndarray
    cov_pass: bool
    aux_diff: np.ndarray  # xi_hat_p - mean(xi_p), (N, n_p)
    aux_se: np.ndarray
    aux_pass: Optional[bool]
    replications: int
    sigma_hat: np.ndarray
    sigma_mean: np.ndarray
    xi_hat: np.ndarray
    xi_mean: np.ndarray
    convexity_tag: str

    @property
    def passed(self) -> bool:
        return bool(self.cov_pass and (self.aux_pass is None or self.aux_pass))

    def to_dict(self) -> dict:
        return {
            "replications": self.replications,
            "pass": self.passed,
            "covariance_pass": bool(self.cov_pass),
            "aux_pass": self.aux_pass,
            "convexity_tag": self.convexity_tag,
            "nodes": [
                {"t": float(t), "min_eig": float(m), "se": float(s), "threshold": float(th),
                 "aux_diff": [float(v) for v in d], "aux_se": [float(v) for v in e]}
                for t, m, s, th, d, e in zip(self.times, self.min_eig, self.cov_se, self.cov_threshold,
                                            self.aux_diff, self.aux_se)
            ],
        }


def monte_carlo_bound_check(process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor],
                            rate_plan: RatePlan, input_plan, replications: int, rng, grid: TimeGrid,
                            sigma0, xi0, substeps: int = DEFAULT_SUBSTEPS, z: float = 3.0) -> BoundCheckReport:
    """Compare the deterministic bounds with Monte Carlo means over sampled schedules.

    Replications are advanced together; inside each fine step the events are
    processed in rounds so every update happens at its exact time.
    """
    M = int(replications)
    if M < 1:
        raise ValueError("at least one replication is required")
    n, n_p = process.n, aux.n_p
    U = np.asarray(input_plan, dtype=float).reshape(len(grid) - 1, aux.m_u)
    bound = propagate_bounds(process, aux, sensors, rate_plan, U, grid, sigma0, xi0, substeps=substeps)
    _check_precondition(process, aux, sensors, bound.xi_hat, grid, U)

    base = rng if isinstance(rng, RngStream) else RngStream(int(_gen(rng).integers(2**63)))
    scheds = [sample_schedule(rate_plan, base.child(r)) for r in range(M)]
    width = max(1, max(sum(s.counts()) for s in scheds)) + 1
    ET = np.full((M, width), np.inf)
    ES = np.zeros((M, width), dtype=int)
    for r, sched in enumerate(scheds):
        ev = sched.events()
        if ev:
            ET[r, :len(ev)] = [e[0] for e in ev]
            ES[r, :len(ev)] = [e[1] for e in ev]
    rows = np.arange(M)
    ptr = np.zeros(M, dtype=int)
    by_id = {s.id: s for s in sensors}

    P = np.broadcast_to(symmetrize(np.atleast_2d(np.asarray(sigma0, dtype=float))), (M, n, n)).copy()
    X = np.broadcast_to(np.asarray(xi0, dtype=float), (M, aux.n_xi)).copy()
    Ns = len(grid)
    P_nodes = np.empty((Ns, M, n, n))
    X_nodes = np.empty((Ns, M, aux.n_xi))
    P_nodes[0], X_nodes[0] = P, X

    def advance(idx, t_from, t_to, u):
        h = t_to - t_from
        if not np.any(h > 0):
            return
        hP = h[:, None, None]
        hx = h[:, None]

        def f(tt, S, Z):
            dS = covariance_rhs(process.A(Z, tt), process.sigma(Z, tt), S)
            fp, fu = aux.rhs(Z, u, tt)
            return dS, np.concatenate([fp, fu], axis=-1)

        S0, Z0 = P[idx], X[idx]
        a1, b1 = f(t_from, S0, Z0)
        a2, b2 = f(t_from + 0.5 * h, S0 + 0.5 * hP * a1, Z0 + 0.5 * hx * b1)
        a3, b3 = f(t_from + 0.5 * h, S0 + 0.5 * hP * a2, Z0 + 0.5 * hx * b2)
        a4, b4 = f(t_to, S0 + hP * a3, Z0 + hx * b3)
        P[idx] = symmetrize(S0 + hP / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4))
        X[idx] = Z0 + hx / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)

    for k in range(Ns - 1):
        a_k, b_k = grid.nodes[k], grid.nodes[k + 1]
        u = U[k]
        sub = np.linspace(a_k, b_k, substeps + 1)
        last_interval = k == Ns - 2
        for j in range(substeps):
            a, b = sub[j], sub[j + 1]
            closed = last_interval and j == substeps - 1
            cur = np.full(M, a)
            while True:
                nxt = ET[rows, ptr]
                idx = np.nonzero((nxt <= b) if closed else (nxt < b))[0]
                if idx.size == 0:
                    break
                te = nxt[idx]
                se = ES[idx, ptr[idx]]
                advance(idx, cur[idx], te, u)
                cur[idx] = te
                for sid in np.unique(se):
                    sel = idx[se == sid]
                    s = by_id[int(sid)]
                    tt = cur[sel]
                    Z = X[sel]
                    C = s.C(Z, tt, n)
                    R = s.R(Z, tt)
                    S = P[sel]
                    K = gain_batch(S, C, R)
                    P[sel] = symmetrize(S - K @ (C @ S))
                    X[sel, :n_p] += s.g(Z, u, tt, n_p)
                ptr[idx] += 1
            advance(np.arange(M), cur, np.full(M, b), u)
        if not (np.all(np.isfinite(P)) and np.all(np.isfinite(X))):
            raise IntegrationDiverged(float(b_k), "Monte Carlo replication")
        P_nodes[k + 1], X_nodes[k + 1] = P, X

    mean_P = P_nodes.mean(axis=1)
    mean_X = X_nodes.mean(axis=1)
    D = symmetrize(bound.sigma_hat - mean_P)
    w, V = np.linalg.eigh(D)
    min_eig = w[:, 0]
    v = V[:, :, 0]  # (N, n)
    quad = np.einsum("ki,krij,kj->kr", v, P_nodes, v)
    ddof = 1 if M > 1 else 0
    se = quad.std(axis=1, ddof=ddof) / math.sqrt(M)
    atol = 1e-9 * (1.0 + np.abs(bound.sigma_hat).max(axis=(1, 2)))
    threshold = -(z * se + atol)
    cov_pass = bool(np.all(min_eig >= threshold))

    xp = X_nodes[..., :n_p]
    diff = bound.xi_hat[:, :n_p] - mean_X[:, :n_p]
    aux_se = xp.std(axis=1, ddof=ddof) / math.sqrt(M)
    tol = z * aux_se + 1e-9 * (1.0 + np.abs(bound.xi_hat[:, :n_p]))
    tag = aux.convexity_tag
    if n_p == 0 or tag == "none":
        aux_pass = None
    elif tag == "affine":
        aux_pass = bool(np.all(np.abs(diff) <= tol))
    elif tag == "concave":
        aux_pass = bool(np.all(diff >= -tol))
    else:
        aux_pass = bool(np.all(diff <= tol))

    return BoundCheckReport(grid.nodes.copy(), min_eig, se, threshold, cov_pass, diff, aux_se, aux_pass, M,
                            bound.sigma_hat, mean_P, bound.xi_hat, mean_X, tag)


# -- baselines ------------------------------------------------------------------

def random_schedule(sensors: Sequence[Sensor], grid: TimeGrid, ocp_node_count: int, rng,
                    per_horizon: bool = True) -> Schedule:
    """Constant-rate Poisson schedule with ``N_O / S`` expected events per sensor.

    With ``per_horizon=False`` the rate itself is ``N_O / S`` events per unit time.
    """
    S = len(sensors)
    if ocp_node_count <= 0 or S == 0:
        return Schedule.empty(S)
    rate = ocp_node_count / S
    if per_horizon:
        rate /= grid.tf - grid.t0
    plan = RatePlan.constant(grid, [rate] * S)
    return sample_schedule(plan, rng)


@dataclass(frozen=True)
class GreedyConfig:
    """Per-sensor costs and a penalty on the auxiliary state after a measurement."""

    costs: Sequence[float]
    penalty: Optional[Callable] = None  # (xi_after, t) -> nonnegative float
    step: Optional[float] = None


def greedy_schedule(process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor], grid: TimeGrid,
                    score_config: GreedyConfig, input_plan=None, sigma0=None, xi0=None,
                    substeps: int = 10) -> Schedule:
    """Myopic scheduler: at each step fire the sensor with the largest positive score.

    ``score_s = tr(P) - tr(P_updated_s) - cost_s - penalty(xi_after_s, t)``;
    ties go to the lower sensor id and at most one sensor fires per step.
    """
    n = process.n
    S = len(sensors)
    step = score_config.step or float(np.min(grid.steps))
    span = grid.tf - grid.t0
    k = max(1, math.ceil(span / step - 1e-9))
    walk = TimeGrid.uniform(grid.t0, grid.tf, k + 1)
    U = (np.zeros((len(grid) - 1, aux.m_u)) if input_plan is None
         else np.asarray(input_plan, dtype=float).reshape(len(grid) - 1, aux.m_u))
    P = symmetrize(np.atleast_2d(np.asarray(sigma0 if sigma0 is not None else np.eye(n), dtype=float)))
    xi = np.asarray(xi0 if xi0 is not None else np.zeros(aux.n_xi), dtype=float).reshape(aux.n_xi).copy()
    costs = np.broadcast_to(np.asarray(score_config.costs, dtype=float), (S,))
    ordered = sorted(sensors, key=lambda s: s.id)
    times = [[] for _ in range(S)]
    zero = np.zeros(S)
    nP = n * n

    for i, t in enumerate(walk.nodes):
        t = float(t)
        u = _input_at(U, grid, t)
        best, best_score = None, 0.0
        for j, s in enumerate(ordered):
            C, R = s.C(xi, t, n), s.R(xi, t)
            _, Pu = update_cov(P, C, R)
            after = xi.copy()
            after[:aux.n_p] += s.g(xi, u, t, aux.n_p)
            pen = score_config.penalty(after, t) if score_config.penalty is not None else 0.0
            score = np.trace(P) - np.trace(Pu) - costs[j] - pen
            if score > best_score:
                best, best_score = j, score
        if best is not None:
            s = ordered[best]
            _, P = update_cov(P, s.C(xi, t, n), s.R(xi, t))
            xi[:aux.n_p] += s.g(xi, u, t, aux.n_p)
            times[s.id - 1].append(t)
        if i == len(walk) - 1:
            break
        t_next = float(walk.nodes[i + 1])
        h = (t_next - t) / substeps

        def rhs(tt, y):
            uu = _input_at(U, grid, tt)
            Z = y[nP:]
            dS = sigma_rhs_batch(y[:nP].reshape(n, n), Z, zero, sensors, process, tt)
            return np.concatenate([dS.ravel(), aux_rhs_batch(Z, uu, zero, aux, sensors, tt)])

        y = np.concatenate([P.ravel(), xi])
        for j in range(substeps):
            ta = t + j * h
            k1 = rhs(ta, y)
            k2 = rhs(ta + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(ta + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(ta + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        P = symmetrize(y[:nP].reshape(n, n))
        xi = y[nP:].copy()
    return Schedule(tuple(np.array(ts) for ts in times))


def m_optimized_schedule(rate_plan: RatePlan, input_plan, K: int, evaluator: Callable, rng) -> Schedule:
    """Sample ``K`` schedules from the plan and keep the one with the smallest ``evaluator`` value.

    ``evaluator(schedule, input_plan) -> float``; ties keep the earliest sample.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    gen = _gen(rng)
    best, best_val = None, np.inf
    for _ in range(K):
        sched = sample_schedule(rate_plan, gen)
        val = float(evaluator(sched, input_plan))
        if best is None or val < best_val:
            best, best_val = sched, val
    return best


@dataclass(frozen=True)
class RunStats:
    mean: float
    std: float
    max: float
    min: float

    def as_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "max": self.max, "min": self.min}


def evaluate_run(signals: Mapping[str, np.ndarray]) -> dict[str, RunStats]:
    """Mean, population standard deviation, maximum and minimum of each recorded signal."""
    out = {}
    for name, values in signals.items():
        v = np.asarray(values, dtype=float).reshape(-1)
        if v.size == 0:
            raise ValueError(f"signal {name!r} is empty")
        out[name] = RunStats(float(v.mean()), float(v.std()), float(v.max()), float(v.min()))
    return out
