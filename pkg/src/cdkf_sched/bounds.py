"""Deterministic ODE bounds on the mean filter covariance and the mean auxiliary state.

The covariance bound replaces the random measurement impulses by their rates::

    dS/dt = A S + S A^T + sigma sigma^T - sum_s lambda_s K_s C_s S

and the perturbed auxiliary block follows ``f_p + sum_s lambda_s g_s``. Both are
evaluated along the bound trajectory of the auxiliary state itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kalman import IntegrationDiverged, covariance_rhs, gain_batch, kalman_gain
from .model import (
    AuxModel,
    ProcessModel,
    RatePlan,
    Sensor,
    TimeGrid,
    clamp_psd,
    symmetrize,
)

__all__ = [
    "BoundTrajectory",
    "aux_bound_rhs",
    "aux_rhs_batch",
    "propagate_bounds",
    "sigma_bound_rhs",
    "sigma_rhs_batch",
]


def sigma_rhs_batch(P, xi, lam, sensors: Sequence[Sensor], process: ProcessModel, t):
    """Batched covariance-bound RHS. ``P``: (B, n, n), ``xi``: (B, n_xi), ``lam``: (B, S)."""
    n = process.n
    out = covariance_rhs(process.A(xi, t), process.sigma(xi, t), P)
    for j, s in enumerate(sensors):
        C = s.C(xi, t, n)
        K = gain_batch(P, C, s.R(xi, t))
        out = out - lam[..., j, None, None] * (K @ (C @ P))
    return symmetrize(out)


def aux_rhs_batch(xi, u, lam, aux: AuxModel, sensors: Sequence[Sensor], t):
    """Batched auxiliary-bound RHS, returned as ``[perturbed, unperturbed]`` stacked on the last axis."""
    fp, fu = aux.rhs(xi, u, t)
    for j, s in enumerate(sensors):
        fp = fp + lam[..., j, None] * s.g(xi, u, t, aux.n_p)
    return np.concatenate([fp, fu], axis=-1)


def sigma_bound_rhs(sigma_hat, aux, rates, sensors: Sequence[Sensor], process: ProcessModel, t):
    """Covariance-bound RHS at one point; ``aux`` is the auxiliary state."""
    P = np.atleast_2d(np.asarray(sigma_hat, dtype=float))
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    xi = np.asarray(aux, dtype=float)
    out = covariance_rhs(process.A(xi, t), process.sigma(xi, t), P)
    for lam, s in zip(rates, sensors):
        if lam == 0.0:
            continue
        C = s.C(xi, t, process.n)
        out = out - lam * (kalman_gain(P, C, s.R(xi, t)) @ (C @ P))
    return symmetrize(out)


def aux_bound_rhs(xi_hat, u, rates, aux: AuxModel, sensors: Sequence[Sensor], t):
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    return aux_rhs_batch(np.asarray(xi_hat, dtype=float), np.asarray(u, dtype=float),
                         rates, aux, sensors, t)


@dataclass(frozen=True)
class BoundTrajectory:
    grid: TimeGrid
    sigma_hat: np.ndarray  # (N, n, n)
    xi_hat: np.ndarray  # (N, n_xi)
    heuristic: bool = False

    def trace(self) -> np.ndarray:
        return np.trace(self.sigma_hat, axis1=1, axis2=2)


def propagate_bounds(process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor],
                     rate_plan: RatePlan, input_plan, grid: TimeGrid, sigma0, xi0,
                     substeps: int = 1) -> BoundTrajectory:
    """RK4 integration of the coupled (covariance bound, auxiliary bound) system.

    Rates and inputs are constant on each grid interval. ``substeps`` RK4
    steps are taken per interval.
    """
    if len(rate_plan.grid) != len(grid) or not np.allclose(rate_plan.grid.nodes, grid.nodes):
        raise ValueError("rate plan is defined on a different grid")
    n = process.n
    U = np.asarray(input_plan, dtype=float).reshape(len(grid) - 1, aux.m_u)
    P = symmetrize(np.atleast_2d(np.asarray(sigma0, dtype=float)))
    xi = np.asarray(xi0, dtype=float).reshape(aux.n_xi)
    sig = np.empty((len(grid), n, n))
    xis = np.empty((len(grid), aux.n_xi))
    sig[0], xis[0] = P, xi
    nP = n * n

    for k, (ta, tb) in enumerate(zip(grid.nodes[:-1], grid.nodes[1:])):
        lam = rate_plan.rates[:, k]
        u = U[k]

        def rhs(t, y):
            x = y[nP:]
            S = y[:nP].reshape(n, n)
            dS = sigma_rhs_batch(S, x, lam, sensors, process, t)
            dx = aux_rhs_batch(x, u, lam, aux, sensors, t)
            return np.concatenate([dS.ravel(), dx])

        h = (tb - ta) / substeps
        y = np.concatenate([P.ravel(), xi])
        for i in range(substeps):
            t = ta + i * h
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = rhs(t + h, y + h * k3)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            S = clamp_psd(symmetrize(y[:nP].reshape(n, n)))
            y[:nP] = S.ravel()
        if not np.all(np.isfinite(y)):
            raise IntegrationDiverged(float(tb), f"bound (node {k + 1})")
        P, xi = y[:nP].reshape(n, n), y[nP:]
        sig[k + 1], xis[k + 1] = P, xi
    return BoundTrajectory(grid, sig, xis, aux.heuristic)
