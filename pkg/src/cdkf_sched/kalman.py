"""Continuous-discrete Kalman filter, RTS smoother and kernel state-space realizations."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import linalg

from .model import (
    GaussianBelief,
    ModelError,
    ProcessModel,
    Schedule,
    Sensor,
    TimeGrid,
    symmetrize,
)

__all__ = [
    "FilterEntry",
    "FilterTrajectory",
    "IllConditionedInnovation",
    "IntegrationDiverged",
    "ScheduleOutOfRange",
    "SmoothedTrajectory",
    "build_kernel_ssm",
    "covariance_rhs",
    "filter_pass",
    "kalman_gain",
    "kernel_function",
    "predict",
    "rts_smooth",
    "update",
]

COND_LIMIT = 1e12


class IntegrationDiverged(ArithmeticError):
    def __init__(self, t: float, what: str = "state"):
        super().__init__(f"{what} integration produced non-finite values at t={t:.6g}")
        self.t = t


class IllConditionedInnovation(ArithmeticError):
    pass


class ScheduleOutOfRange(ValueError):
    pass


def covariance_rhs(A: np.ndarray, sig: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Lyapunov right-hand side ``A P + P A^T + sigma sigma^T`` (batched, symmetrized)."""
    AP = A @ P
    return symmetrize(AP + np.swapaxes(AP, -1, -2) + sig @ np.swapaxes(sig, -1, -2))


def gain_batch(P: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Kalman gains for stacks of matrices; no conditioning checks (hot path)."""
    CP = C @ P
    S = CP @ np.swapaxes(C, -1, -2) + R
    return np.swapaxes(np.linalg.solve(S, CP), -1, -2)


def kalman_gain(cov: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """``cov C^T (C cov C^T + R)^{-1}`` via a Cholesky solve."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    C = np.atleast_2d(np.asarray(C, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    CP = C @ cov
    S = symmetrize(CP @ C.T + R)
    if np.linalg.cond(S) > COND_LIMIT:
        raise IllConditionedInnovation(f"innovation covariance condition number exceeds {COND_LIMIT:g}")
    try:
        factor = linalg.cho_factor(S, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise IllConditionedInnovation("innovation covariance is not positive definite") from exc
    return linalg.cho_solve(factor, CP).T


def _rk4(f, y, t, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _substeps(t_start: float, t_end: float, step: float) -> tuple[int, float]:
    span = t_end - t_start
    n = max(1, math.ceil(span / step - 1e-9))
    return n, span / n


def predict(belief: GaussianBelief, process: ProcessModel, aux_traj: Callable,
            t_start: float, t_end: float, step: float) -> GaussianBelief:
    """Propagate mean and covariance over ``[t_start, t_end]`` with fixed-step RK4."""
    if t_end < t_start:
        raise ValueError("t_end must not precede t_start")
    if step <= 0:
        raise ValueError("step must be positive")
    if t_end == t_start:
        return belief
    mu, P = _predict_arrays(belief.mean, belief.cov, process, aux_traj, t_start, t_end, step)
    return GaussianBelief(mu, P)


def _predict_arrays(mu, P, process, aux_traj, t_start, t_end, step):
    n = process.n

    def rhs(t, y):
        xi = aux_traj(t)
        A = process.A(xi, t)
        m, S = y[:n], y[n:].reshape(n, n)
        dm = A @ m + process.b(xi, t)
        dS = covariance_rhs(A, process.sigma(xi, t), S)
        return np.concatenate([dm, dS.ravel()])

    steps, h = _substeps(t_start, t_end, step)
    y = np.concatenate([mu, P.ravel()])
    t = t_start
    for i in range(steps):
        y = _rk4(rhs, y, t, h)
        t = t_start + (i + 1) * h
        S = symmetrize(y[n:].reshape(n, n))
        y[n:] = S.ravel()
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(t)
    return y[:n], y[n:].reshape(n, n)


def transition_matrix(process: ProcessModel, aux_traj: Callable, t_start: float,
                      t_end: float, step: float) -> np.ndarray:
    """State transition ``Phi(t_end, t_start)`` of ``dPhi/dt = A Phi``."""
    n = process.n
    Phi = np.eye(n)
    if t_end == t_start:
        return Phi
    steps, h = _substeps(t_start, t_end, step)

    def rhs(t, y):
        return process.A(aux_traj(t), t) @ y

    t = t_start
    for i in range(steps):
        Phi = _rk4(rhs, Phi, t, h)
        t = t_start + (i + 1) * h
    if not np.all(np.isfinite(Phi)):
        raise IntegrationDiverged(t, "transition")
    return Phi


def update_cov(P: np.ndarray, C: np.ndarray, R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Covariance part of the measurement update; returns ``(K, (I - K C) P)``."""
    K = kalman_gain(P, C, R)
    return K, symmetrize(P - K @ (C @ P))


def update(belief: GaussianBelief, sensor: Sensor, aux, t: float, y) -> GaussianBelief:
    """Measurement update with ``sensor`` at time ``t`` using observation ``y``."""
    n = belief.n
    C = sensor.C(aux, t, n)
    R = sensor.R(aux, t)
    K, P = update_cov(belief.cov, C, R)
    y = np.asarray(y, dtype=float).reshape(sensor.q)
    mu = belief.mean + K @ (y - C @ belief.mean)
    return GaussianBelief(mu, P)


@dataclass(frozen=True)
class FilterEntry:
    time: float
    belief: GaussianBelief
    event: str  # "predicted" or "updated"
    sensor: Optional[int] = None


@dataclass(frozen=True)
class FilterTrajectory:
    entries: tuple

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> FilterEntry:
        return self.entries[i]

    def posterior(self) -> list[FilterEntry]:
        """Last entry at each distinct time (the filtered belief after all updates at that time)."""
        out: list[FilterEntry] = []
        for e in self.entries:
            if out and out[-1].time == e.time:
                out[-1] = e
            else:
                out.append(e)
        return out

    def predicted(self) -> list[FilterEntry]:
        """First entry at each distinct time (the belief before any update at that time)."""
        out: list[FilterEntry] = []
        for e in self.entries:
            if not out or out[-1].time != e.time:
                out.append(e)
        return out

    def times(self) -> np.ndarray:
        return np.array([e.time for e in self.posterior()])

    def means(self) -> np.ndarray:
        return np.array([e.belief.mean for e in self.posterior()])

    def covs(self) -> np.ndarray:
        return np.array([e.belief.cov for e in self.posterior()])


def _default_step(grid: TimeGrid) -> float:
    return float(np.min(grid.steps)) / 10.0


def filter_pass(process: ProcessModel, sensors: Sequence[Sensor], aux_traj: Callable,
                schedule: Schedule, measurements: Sequence, prior: GaussianBelief,
                grid: TimeGrid, step: Optional[float] = None) -> FilterTrajectory:
    """Predict/update sweep over ``grid``.

    ``measurements[s][i]`` is the observation of sensor ``s+1`` at
    ``schedule.times[s][i]``. A belief is recorded at every grid node and every
    event time; each update entry follows a predicted entry at the same time.
    """
    step = _default_step(grid) if step is None else step
    if len(measurements) != schedule.n_sensors:
        raise ValueError("measurements must have one sequence per sensor")
    by_id = {s.id: s for s in sensors}
    events = []
    for s, ts in enumerate(schedule.times):
        if len(measurements[s]) != ts.size:
            raise ValueError(f"sensor {s + 1}: {ts.size} times but {len(measurements[s])} measurements")
        if ts.size and (ts[0] < grid.t0 or ts[-1] > grid.tf):
            raise ScheduleOutOfRange(f"sensor {s + 1} has events outside [{grid.t0}, {grid.tf}]")
        events.extend((float(t), s + 1, measurements[s][i]) for i, t in enumerate(ts))
    events.sort(key=lambda e: (e[0], e[1]))

    stops = np.union1d(grid.nodes, [e[0] for e in events])
    entries = []
    belief = prior
    t_prev = stops[0]
    ei = 0
    for t in stops:
        belief = predict(belief, process, aux_traj, t_prev, t, step)
        entries.append(FilterEntry(float(t), belief, "predicted"))
        while ei < len(events) and events[ei][0] == t:
            _, sid, y = events[ei]
            belief = update(belief, by_id[sid], aux_traj(t), t, y)
            entries.append(FilterEntry(float(t), belief, "updated", sid))
            ei += 1
        t_prev = t
    return FilterTrajectory(tuple(entries))


@dataclass(frozen=True)
class SmoothedTrajectory:
    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray


def rts_smooth(traj: FilterTrajectory, process: ProcessModel, aux_traj: Callable,
               step: Optional[float] = None) -> SmoothedTrajectory:
    """Rauch-Tung-Striebel backward pass over the distinct times of ``traj``."""
    post = traj.posterior()
    pred = traj.predicted()
    times = np.array([e.time for e in post])
    if step is None:
        # events can sit within round-off of a grid node, so the smallest gap is a poor scale
        gaps = np.diff(times)
        step = float(np.median(gaps)) / 10.0 if gaps.size else 1.0
    mf = np.array([e.belief.mean for e in post])
    Pf = np.array([e.belief.cov for e in post])
    ms = mf.copy()
    Ps = Pf.copy()
    for k in range(times.size - 2, -1, -1):
        Phi = transition_matrix(process, aux_traj, times[k], times[k + 1], step)
        m_pred = pred[k + 1].belief.mean
        P_pred = pred[k + 1].belief.cov
        cross = Pf[k] @ Phi.T
        try:
            G = linalg.solve(P_pred, cross.T, assume_a="pos").T
        except (linalg.LinAlgError, ValueError):
            G = np.linalg.lstsq(P_pred, cross.T, rcond=None)[0].T
        ms[k] = mf[k] + G @ (ms[k + 1] - m_pred)
        Ps[k] = symmetrize(Pf[k] + G @ (Ps[k + 1] - P_pred) @ G.T)
    return SmoothedTrajectory(times, ms, Ps, mf, Pf)


KERNELS = ("exponential", "matern32")


def build_kernel_ssm(kind: str, lengthscale: float, variance: float):
    """State-space realization of a stationary GP kernel.

    Returns ``(process, stationary_cov, output_row)``.
    """
    if lengthscale <= 0 or variance <= 0:
        raise ModelError("kernel lengthscale and variance must be positive")
    if kind == "exponential":
        A = np.array([[-1.0 / lengthscale]])
        L = np.array([[math.sqrt(2.0 * variance / lengthscale)]])
        P_inf = np.array([[variance]])
        H = np.array([[1.0]])
    elif kind == "matern32":
        lam = math.sqrt(3.0) / lengthscale
        A = np.array([[0.0, 1.0], [-lam**2, -2.0 * lam]])
        L = np.array([[0.0], [math.sqrt(4.0 * variance * lam**3)]])
        P_inf = np.diag([variance, variance * lam**2])
        H = np.array([[1.0, 0.0]])
    else:
        raise ModelError(f"unknown kernel {kind!r}; expected one of {KERNELS}")
    A.setflags(write=False)
    L.setflags(write=False)
    process = ProcessModel(n=A.shape[0], m=1, drift=lambda xi, t: A, diffusion=lambda xi, t: L)
    return process, P_inf, H


def kernel_function(kind: str, lengthscale: float, variance: float) -> Callable:
    """Covariance function ``k(tau)`` matching :func:`build_kernel_ssm`."""
    if kind == "exponential":
        return lambda tau: variance * np.exp(-np.abs(tau) / lengthscale)
    if kind == "matern32":
        lam = math.sqrt(3.0) / lengthscale
        return lambda tau: variance * (1.0 + lam * np.abs(tau)) * np.exp(-lam * np.abs(tau))
    raise ModelError(f"unknown kernel {kind!r}")
