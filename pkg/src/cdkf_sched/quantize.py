"""Deterministic measurement times from piecewise-constant intensities.

The normalized intensity of one sensor is quantized with ``n`` atoms that
minimize the Wasserstein-2 distance: the horizon is cut into ``n`` cells of
equal intensity mass and each atom sits at the intensity-weighted centroid of
its cell. Everything is exact for piecewise-constant rates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import RatePlan, Schedule, TimeGrid

__all__ = [
    "DegenerateIntensity",
    "IntensityProfile",
    "cumulative_intensity",
    "quantize_times",
    "schedule_from_plan",
    "select_count",
    "wasserstein2_sq",
]


class DegenerateIntensity(ValueError):
    pass


@dataclass(frozen=True)
class IntensityProfile:
    """One sensor's rates on a grid together with the cumulative intensity at the nodes."""

    grid: TimeGrid
    rates: np.ndarray
    cumulative: np.ndarray = field(init=False)

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        if rates.size != len(self.grid) - 1:
            raise ValueError("one rate per grid interval required")
        if np.any(rates < 0):
            raise ValueError("rates must be nonnegative")
        cum = np.concatenate([[0.0], np.cumsum(rates * self.grid.steps)])
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "cumulative", cum)

    @classmethod
    def from_plan(cls, plan: RatePlan, sensor_id: int) -> "IntensityProfile":
        return cls(plan.grid, plan.rates[sensor_id - 1])

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    @property
    def max_rate(self) -> float:
        return float(self.rates.max()) if self.rates.size else 0.0

    def rate_at(self, t) -> np.ndarray:
        return self.rates[self.grid.interval_index(t)]

    def inverse(self, mass) -> np.ndarray:
        """Smallest ``t`` with ``Lambda(t) >= mass`` (left edge on flat stretches)."""
        mass = np.asarray(mass, dtype=float)
        cum, nodes = self.cumulative, self.grid.nodes
        idx = np.searchsorted(cum, mass, side="left")
        idx = np.clip(idx, 0, nodes.size - 1)
        at_node = cum[idx] == mass
        seg = np.clip(idx - 1, 0, self.rates.size - 1)
        rate = self.rates[seg]
        with np.errstate(divide="ignore", invalid="ignore"):
            inside = nodes[seg] + (mass - cum[seg]) / rate
        t = np.where(at_node | (rate <= 0), nodes[idx], inside)
        return np.clip(t, nodes[0], nodes[-1])

    def moments(self) -> tuple[float, float]:
        """Mean and variance of the normalized intensity."""
        a, b = self.grid.nodes[:-1], self.grid.nodes[1:]
        m0 = self.total
        if m0 <= 0:
            raise DegenerateIntensity("zero total intensity")
        m1 = np.sum(self.rates * (b**2 - a**2) / 2.0) / m0
        m2 = np.sum(self.rates * (b**3 - a**3) / 3.0) / m0
        return float(m1), float(m2 - m1**2)


def cumulative_intensity(profile: IntensityProfile, t: float) -> float:
    """Exact ``Lambda(t)`` for the piecewise-constant profile."""
    grid = profile.grid
    if not grid.t0 <= t <= grid.tf:
        raise ValueError(f"t={t} outside horizon [{grid.t0}, {grid.tf}]")
    k = grid.interval_index(t)
    return float(profile.cumulative[k] + profile.rates[k] * (t - grid.nodes[k]))


def select_count(Lambda_T: float) -> int:
    """Number of deterministic measurements matching the expected Poisson count."""
    if Lambda_T < 0:
        raise ValueError("cumulative intensity must be nonnegative")
    return int(math.floor(Lambda_T + 0.5))


def _cell_moments(profile: IntensityProfile, a: np.ndarray, b: np.ndarray):
    """Mass and first moment of the intensity on each cell ``[a_i, b_i]``."""
    lo = profile.grid.nodes[:-1]
    hi = profile.grid.nodes[1:]
    left = np.maximum(a[:, None], lo[None, :])
    right = np.minimum(b[:, None], hi[None, :])
    w = np.clip(right - left, 0.0, None)
    right = left + w
    mass = (profile.rates[None, :] * w).sum(axis=1)
    first = (profile.rates[None, :] * (right**2 - left**2) / 2.0).sum(axis=1)
    return mass, first


def cell_boundaries(profile: IntensityProfile, n_s: int) -> np.ndarray:
    total = profile.total
    inner = profile.inverse(np.arange(1, n_s) * (total / n_s))
    return np.concatenate([[profile.grid.t0], inner, [profile.grid.tf]])


def quantize_times(profile: IntensityProfile, n_s: int) -> np.ndarray:
    """Centroids of ``n_s`` equal-mass cells of the intensity."""
    if n_s < 1:
        raise ValueError("n_s must be at least 1")
    if profile.total <= 0:
        raise DegenerateIntensity("cannot place measurements under zero total intensity")
    bounds = cell_boundaries(profile, n_s)
    mass, first = _cell_moments(profile, bounds[:-1], bounds[1:])
    centroids = np.where(mass > 0, first / np.where(mass > 0, mass, 1.0),
                         0.5 * (bounds[:-1] + bounds[1:]))
    return centroids


def wasserstein2_sq(profile: IntensityProfile, times, points_per_cell: int | None = None) -> float:
    """Squared W2 distance between the normalized intensity and the uniform atoms at ``times``.

    Composite Simpson quadrature of the squared quantile difference over a
    quantile grid aligned with the atom boundaries ``i / n``.
    """
    times = np.sort(np.asarray(times, dtype=float).reshape(-1))
    if profile.total <= 0:
        return 0.0 if times.size == 0 else float("nan")
    n = times.size
    if n == 0:
        raise DegenerateIntensity("distance to an empty set of atoms is undefined")
    k = points_per_cell or max(16, math.ceil(2000 / n))
    k += k % 2
    total = profile.total
    acc = 0.0
    w = np.ones(k + 1)
    w[1:-1:2], w[2:-1:2] = 4.0, 2.0
    for i in range(n):
        p = np.linspace(i / n, (i + 1) / n, k + 1)
        q = profile.inverse(p * total)
        acc += (1.0 / n) / (3.0 * k) * np.dot(w, (q - times[i]) ** 2)
    return float(max(acc, 0.0))


def schedule_from_plan(plan: RatePlan) -> Schedule:
    """Count rule plus centroid quantization, independently for every sensor."""
    out = []
    for s in range(plan.n_sensors):
        prof = IntensityProfile.from_plan(plan, s + 1)
        n_s = select_count(prof.total)
        out.append(quantize_times(prof, n_s) if n_s > 0 else np.empty(0))
    return Schedule(tuple(out))
