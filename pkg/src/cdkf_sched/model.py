"""Problem-definition types for continuous-discrete filtering with auxiliary dynamics.

Callback conventions
--------------------
Every model callback is a pure function. Auxiliary-state arguments may carry
leading batch axes (``xi.shape == batch + (n_xi,)``) and ``t`` may be a scalar
or an array of shape ``batch``; callbacks must broadcast over those axes the
way ordinary numpy expressions do (index components with ``xi[..., i]``).
Returned matrices may omit the batch axes when they do not depend on the
batch (e.g. a constant drift matrix); the framework broadcasts them.

The auxiliary state is laid out as ``xi = [xi_p, xi_u]``: the perturbed block
(jumps at measurements) first, the unperturbed block last.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "AuxModel",
    "ConvexityTag",
    "GaussianBelief",
    "ModelError",
    "ProcessModel",
    "RatePlan",
    "Schedule",
    "Sensor",
    "TimeGrid",
    "eval_matrix",
    "eval_vector",
    "symmetrize",
    "validate_model",
]

CONVEXITY_TAGS = ("affine", "concave", "convex", "none")
ConvexityTag = str

EIG_FLOOR = -1e-10


class ModelError(ValueError):
    """Raised when a model object violates a structural invariant."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def eval_matrix(cb, xi, t, shape, *args) -> np.ndarray:
    """Evaluate a matrix callback and broadcast it to ``batch + shape``."""
    xi = np.asarray(xi, dtype=float)
    batch = np.broadcast_shapes(xi.shape[:-1], np.shape(t))
    out = np.asarray(cb(xi, *args, t), dtype=float)
    return np.broadcast_to(out, batch + tuple(shape))


def eval_vector(cb, xi, t, size, *args) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    batch = np.broadcast_shapes(xi.shape[:-1], np.shape(t))
    out = np.asarray(cb(xi, *args, t), dtype=float)
    return np.broadcast_to(out, batch + (size,))


@dataclass(frozen=True)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ModelError("a time grid needs at least 2 nodes")
        if not np.all(np.diff(nodes) > 0):
            raise ModelError("time grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, t0: float, tf: float, n_nodes: int) -> "TimeGrid":
        return cls(np.linspace(t0, tf, int(n_nodes)))

    @property
    def t0(self) -> float:
        return float(self.nodes[0])

    @property
    def tf(self) -> float:
        return float(self.nodes[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def __len__(self) -> int:
        return self.nodes.size

    def interval_index(self, t) -> np.ndarray | int:
        """Index of the interval ``[t_k, t_{k+1})`` containing ``t``; ``tf`` maps to the last."""
        idx = np.searchsorted(self.nodes, t, side="right") - 1
        idx = np.clip(idx, 0, self.nodes.size - 2)
        return int(idx) if np.ndim(idx) == 0 else idx

    def contains(self, t) -> bool:
        t = np.asarray(t)
        return bool(np.all((t >= self.t0) & (t <= self.tf)))


@dataclass(frozen=True)
class ProcessModel:
    """Linear SDE ``dx = (A(xi, t) x + b(xi, t)) dt + sigma(xi, t) dW``.

    ``bias`` is optional and only moves the mean; covariance propagation ignores it.
    """

    n: int
    m: int
    drift: Callable
    diffusion: Callable
    bias: Optional[Callable] = None

    def A(self, xi, t) -> np.ndarray:
        return eval_matrix(self.drift, xi, t, (self.n, self.n))

    def sigma(self, xi, t) -> np.ndarray:
        return eval_matrix(self.diffusion, xi, t, (self.n, self.m))

    def b(self, xi, t) -> np.ndarray:
        if self.bias is None:
            batch = np.broadcast_shapes(np.shape(xi)[:-1], np.shape(t))
            return np.zeros(batch + (self.n,))
        return eval_vector(self.bias, xi, t, self.n)


@dataclass(frozen=True)
class Sensor:
    """A sensor ``y = C(xi, t) x + v`` with ``v ~ N(0, R(xi, t))``.

    ``jump(xi, u, t)`` is the increment applied to the perturbed auxiliary
    block each time this sensor fires. Jumps are assumed square-integrable
    along the planned path; nothing here checks that.
    """

    id: int
    q: int
    output: Callable
    noise_cov: Callable
    jump: Callable

    def C(self, xi, t, n: int) -> np.ndarray:
        return eval_matrix(self.output, xi, t, (self.q, n))

    def R(self, xi, t) -> np.ndarray:
        return eval_matrix(self.noise_cov, xi, t, (self.q, self.q))

    def g(self, xi, u, t, n_p: int) -> np.ndarray:
        return eval_vector(self.jump, xi, t, n_p, u)


@dataclass(frozen=True)
class AuxModel:
    """Auxiliary dynamics split into perturbed (``f_p``) and unperturbed (``f_u``) blocks.

    ``f_p(xi, u, t)`` sees the full auxiliary state; ``f_u(xi_u, u, t)`` only
    the unperturbed block, so it cannot depend on measurement jumps.
    """

    n_xi: int
    n_p: int
    m_u: int
    f_p: Callable
    f_u: Callable
    convexity_tag: ConvexityTag = "affine"
    names: Sequence[str] = field(default=())

    def __post_init__(self):
        if not 0 <= self.n_p <= self.n_xi:
            raise ModelError(f"perturbed dimension {self.n_p} outside [0, {self.n_xi}]")
        if self.convexity_tag not in CONVEXITY_TAGS:
            raise ModelError(f"unknown convexity tag {self.convexity_tag!r}")
        if self.names and len(self.names) != self.n_xi:
            raise ModelError("names must label every auxiliary component")

    @property
    def heuristic(self) -> bool:
        """True when the bound on the perturbed state carries no guarantee."""
        return self.convexity_tag == "none"

    def rhs(self, xi, u, t) -> tuple[np.ndarray, np.ndarray]:
        xi = np.asarray(xi, dtype=float)
        u = np.asarray(u, dtype=float)
        fp = eval_vector(self.f_p, xi, t, self.n_p, u)
        fu = eval_vector(lambda x, uu, tt: self.f_u(x[..., self.n_p:], uu, tt), xi, t,
                         self.n_xi - self.n_p, u)
        return fp, fu


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float).reshape(mean.size, mean.size)
        cov = 0.5 * (cov + cov.T)
        w = np.linalg.eigvalsh(cov)
        if not np.all(np.isfinite(w)):
            raise ModelError("covariance has non-finite entries")
        if w[0] < EIG_FLOOR:
            raise ModelError(f"covariance eigenvalue {w[0]:.3e} below floor {EIG_FLOOR}")
        if w[0] < 0.0:
            cov = clamp_psd(cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.size


def clamp_psd(cov: np.ndarray) -> np.ndarray:
    """Clamp negative round-off eigenvalues of symmetric matrices (batched) to zero."""
    w, v = np.linalg.eigh(cov)
    if np.all(w >= 0):
        return cov
    w = np.maximum(w, 0.0)
    out = (v * w[..., None, :]) @ np.swapaxes(v, -1, -2)
    return symmetrize(out)


@dataclass(frozen=True)
class RatePlan:
    """Per-sensor intensities, constant on each grid interval. ``rates[s, k]`` is sensor ``s+1`` on interval ``k``."""

    grid: TimeGrid
    rates: np.ndarray

    def __post_init__(self):
        rates = np.array(self.rates, dtype=float, ndmin=2)
        if rates.shape[1] != len(self.grid) - 1:
            raise ModelError(f"rates have {rates.shape[1]} intervals, grid has {len(self.grid) - 1}")
        if np.any(rates < 0) or not np.all(np.isfinite(rates)):
            raise ModelError("rates must be finite and nonnegative")
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    @property
    def n_sensors(self) -> int:
        return self.rates.shape[0]

    def at(self, t) -> np.ndarray:
        return self.rates[:, self.grid.interval_index(t)]

    def sensor(self, sensor_id: int) -> "RatePlan":
        return RatePlan(self.grid, self.rates[sensor_id - 1: sensor_id])

    @classmethod
    def constant(cls, grid: TimeGrid, values: Sequence[float]) -> "RatePlan":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return cls(grid, np.repeat(values, len(grid) - 1, axis=1))


@dataclass(frozen=True)
class Schedule:
    """Per-sensor measurement times; ``times[s]`` belongs to sensor ``s+1``."""

    times: tuple

    def __post_init__(self):
        times = []
        for i, ts in enumerate(self.times):
            arr = np.array(ts, dtype=float).reshape(-1)
            if arr.size > 1 and not np.all(np.diff(arr) > 0):
                raise ModelError(f"sensor {i + 1} times are not strictly increasing")
            arr.setflags(write=False)
            times.append(arr)
        object.__setattr__(self, "times", tuple(times))

    @classmethod
    def empty(cls, n_sensors: int) -> "Schedule":
        return cls(tuple(np.empty(0) for _ in range(n_sensors)))

    @property
    def n_sensors(self) -> int:
        return len(self.times)

    def counts(self) -> list[int]:
        return [ts.size for ts in self.times]

    def events(self) -> list[tuple[float, int]]:
        """Chronological ``(time, sensor_id)`` pairs; simultaneous events ordered by sensor id."""
        ev = [(float(t), s + 1) for s, ts in enumerate(self.times) for t in ts]
        ev.sort()
        return ev

    def within(self, grid: TimeGrid) -> bool:
        return all(grid.contains(ts) for ts in self.times if ts.size)


def validate_model(process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor],
                   grid: TimeGrid, aux_traj: Callable, u_nominal=None) -> list[str]:
    """Probe every callback at every grid node and list structural violations.

    ``aux_traj(t)`` supplies a nominal auxiliary state. Callback exceptions are
    reported, never raised.
    """
    violations: list[str] = []
    u = np.zeros(aux.m_u) if u_nominal is None else np.asarray(u_nominal, dtype=float)
    n = process.n
    ids = [s.id for s in sensors]
    if sorted(ids) != list(range(1, len(sensors) + 1)):
        violations.append(f"sensor ids {ids} are not 1..{len(sensors)}")

    def probe(label, t, fn, expect):
        try:
            out = np.asarray(fn(), dtype=float)
        except Exception as exc:  # noqa: BLE001 - reported, not raised
            violations.append(f"{label} failed at t={t:g}: {exc!r}")
            return None
        if out.shape != expect:
            violations.append(f"{label} returned shape {out.shape}, expected {expect} at t={t:g}")
            return None
        if not np.all(np.isfinite(out)):
            violations.append(f"{label} returned non-finite values at t={t:g}")
            return None
        return out

    seen = set()

    def once(label, msg):
        if label not in seen:
            seen.add(label)
            violations.append(msg)

    for t in grid.nodes:
        t = float(t)
        try:
            xi = np.asarray(aux_traj(t), dtype=float)
        except Exception as exc:  # noqa: BLE001
            violations.append(f"aux_traj failed at t={t:g}: {exc!r}")
            continue
        if xi.shape != (aux.n_xi,):
            violations.append(f"aux_traj returned shape {xi.shape}, expected {(aux.n_xi,)}")
            continue
        before = len(violations)
        probe("drift", t, lambda: process.drift(xi, t), (n, n))
        probe("diffusion", t, lambda: process.diffusion(xi, t), (n, process.m))
        if process.bias is not None:
            probe("bias", t, lambda: process.bias(xi, t), (n,))
        probe("f_p", t, lambda: np.reshape(aux.f_p(xi, u, t), -1), (aux.n_p,))
        probe("f_u", t, lambda: np.reshape(aux.f_u(xi[aux.n_p:], u, t), -1), (aux.n_xi - aux.n_p,))
        for s in sensors:
            probe(f"sensor {s.id} output", t, lambda: s.output(xi, t), (s.q, n))
            probe(f"sensor {s.id} jump", t, lambda: np.reshape(s.jump(xi, u, t), -1), (aux.n_p,))
            R = probe(f"sensor {s.id} noise_cov", t, lambda: s.noise_cov(xi, t), (s.q, s.q))
            if R is not None:
                if not np.allclose(R, R.T, rtol=0, atol=1e-12 * max(1.0, np.abs(R).max())):
                    once(f"asym{s.id}", f"sensor {s.id} non-symmetric noise at t={t:g}")
                elif np.linalg.eigvalsh(R)[0] <= 0:
                    once(f"npd{s.id}", f"sensor {s.id} non-PD noise at t={t:g}")
        # one report per distinct failure is enough; stop after the first bad node
        if len(violations) > before:
            break
    return violations
