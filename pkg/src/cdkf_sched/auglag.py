"""Augmented-Lagrangian solver for bound-constrained NLPs.

Problem form::

    min f(x)  s.t.  c_eq(x) = 0,  c_in(x) <= 0,  lower <= x <= upper

Outer iterations update multipliers and the penalty (PHR augmented
Lagrangian); each inner subproblem is a bound-constrained minimization solved
by projected quasi-Newton steps. The curvature model is the Gauss-Newton
penalty term ``rho J^T J`` plus a damped-BFGS secant approximation of the
Lagrangian curvature; only first derivatives are ever evaluated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg, sparse
from scipy.linalg import blas

__all__ = [
    "FunctionNlp",
    "Nlp",
    "NlpEval",
    "NlpResult",
    "SolverOptions",
    "gradient_check",
    "minimize_auglag",
    "projected_gradient",
]

log = logging.getLogger(__name__)


@dataclass
class NlpEval:
    f: float
    c_eq: np.ndarray
    c_in: np.ndarray
    grad: Optional[np.ndarray] = None
    J_eq: Optional[sparse.spmatrix] = None
    J_in: Optional[sparse.spmatrix] = None

    def max_violation(self) -> float:
        v = 0.0
        if self.c_eq.size:
            v = max(v, float(np.abs(self.c_eq).max()))
        if self.c_in.size:
            v = max(v, float(np.maximum(self.c_in, 0.0).max()))
        return v


class Nlp:
    """Interface consumed by :func:`minimize_auglag`."""

    n: int
    lower: np.ndarray
    upper: np.ndarray

    def evaluate(self, x: np.ndarray, derivatives: bool = True) -> NlpEval:
        raise NotImplementedError


def _fd_jacobian(fun, x, step=None):
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(fun(x))
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        h = (step or np.cbrt(np.finfo(float).eps)) * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        J[:, j] = (np.atleast_1d(fun(x + e)) - np.atleast_1d(fun(x - e))) / (2 * h)
    return J


class FunctionNlp(Nlp):
    """Small dense NLP from plain callables; missing derivatives use central differences."""

    def __init__(self, f: Callable, n: int, *, grad: Callable | None = None,
                 c_eq: Callable | None = None, jac_eq: Callable | None = None,
                 c_in: Callable | None = None, jac_in: Callable | None = None,
                 lower=None, upper=None):
        self.n = n
        self._f, self._grad = f, grad
        self._ceq, self._jeq = c_eq, jac_eq
        self._cin, self._jin = c_in, jac_in
        self.lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def evaluate(self, x, derivatives=True):
        x = np.asarray(x, dtype=float)
        ceq = np.atleast_1d(self._ceq(x)).astype(float) if self._ceq else np.empty(0)
        cin = np.atleast_1d(self._cin(x)).astype(float) if self._cin else np.empty(0)
        ev = NlpEval(float(self._f(x)), ceq, cin)
        if derivatives:
            ev.grad = (np.asarray(self._grad(x), dtype=float) if self._grad
                       else _fd_jacobian(self._f, x)[0])
            ev.J_eq = sparse.csr_matrix(
                (self._jeq(x) if self._jeq else _fd_jacobian(self._ceq, x)) if self._ceq
                else np.empty((0, self.n)))
            ev.J_in = sparse.csr_matrix(
                (self._jin(x) if self._jin else _fd_jacobian(self._cin, x)) if self._cin
                else np.empty((0, self.n)))
        return ev


@dataclass
class SolverOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-6
    max_outer: int = 50
    max_inner: int = 100
    penalty_init: float = 10.0
    penalty_growth: float = 10.0
    penalty_max: float = 1e12
    inner_tol_init: float = 1e-2
    progress_ratio: float = 0.5
    multiplier_max: float = 1e10

    @classmethod
    def from_mapping(cls, cfg: dict) -> "SolverOptions":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: cfg[k] for k in names if k in cfg})


@dataclass
class NlpResult:
    x: np.ndarray
    f: float
    max_violation: float
    pg_norm: float
    converged: bool
    outer_iterations: int
    inner_iterations: int
    evaluations: int
    multipliers_eq: np.ndarray
    multipliers_in: np.ndarray
    merit_history: list = field(default_factory=list)  # (before, after) the inner solve, per outer iteration
    message: str = ""


def projected_gradient(x, g, lower, upper) -> np.ndarray:
    return x - np.clip(x - g, lower, upper)


def _lagrangian_grad(ev: NlpEval, y, mu):
    g = ev.grad.copy()
    if ev.c_eq.size:
        g += ev.J_eq.T @ y
    if ev.c_in.size:
        g += ev.J_in.T @ mu
    return g


def _weighted_grad(e: NlpEval, ye, s):
    g = e.grad.copy()
    if e.c_eq.size:
        g += e.J_eq.T @ ye
    if e.c_in.size:
        g += e.J_in.T @ s
    return g


class _Merit:
    """PHR augmented-Lagrangian merit at fixed multipliers and penalty."""

    def __init__(self, y, mu, rho):
        self.y, self.mu, self.rho = y, mu, rho

    def weights(self, e: NlpEval):
        return self.y + self.rho * e.c_eq, np.maximum(0.0, self.mu + self.rho * e.c_in)

    def value(self, e: NlpEval) -> float:
        val = e.f
        if e.c_eq.size:
            val += self.y @ e.c_eq + 0.5 * self.rho * (e.c_eq @ e.c_eq)
        if e.c_in.size:
            s = np.maximum(0.0, self.mu + self.rho * e.c_in)
            val += (s @ s - self.mu @ self.mu) / (2.0 * self.rho)
        return float(val) if np.isfinite(val) else np.inf

    def grad(self, e: NlpEval) -> np.ndarray:
        return _weighted_grad(e, *self.weights(e))


class _SecantModel:
    """Dense damped-BFGS approximation of the Lagrangian curvature (Powell damping keeps it PD).

    Only the lower triangle of ``Q`` is maintained.
    """

    def __init__(self, n: int):
        self.Q = np.asfortranarray(np.eye(n))
        self.scaled = False

    def update(self, s, yv):
        sy = float(s @ yv)
        if not self.scaled:
            if sy <= 0.0:
                return
            self.Q *= float(yv @ yv) / sy
            self.scaled = True
        Qs = blas.dsymv(1.0, self.Q, s, lower=1)
        sQs = float(s @ Qs)
        if sQs <= 1e-16:
            return
        theta = 1.0 if sy >= 0.2 * sQs else 0.8 * sQs / (sQs - sy)
        r = theta * yv + (1.0 - theta) * Qs
        Q = blas.dsyr(1.0 / float(s @ r), r, a=self.Q, lower=1, overwrite_a=1)
        self.Q = blas.dsyr(-1.0 / sQs, Qs, a=Q, lower=1, overwrite_a=1)


def _curvature(e: NlpEval, merit: _Merit, model: _SecantModel) -> np.ndarray:
    """Secant Lagrangian curvature plus the Gauss-Newton penalty term ``rho J^T J`` (lower triangle valid)."""
    B = model.Q.copy(order="K")
    blocks = [e.J_eq] if e.c_eq.size else []
    act = np.flatnonzero(merit.mu + merit.rho * e.c_in > 0)
    if act.size:
        blocks.append(e.J_in[act])
    if blocks:
        J = sparse.vstack(blocks, format="csr")
        G = (J.T @ J).tocoo()
        B[G.row, G.col] += merit.rho * G.data
    return B


def _search_direction(B, g, free):
    """Quasi-Newton step on the free variables, diagonally scaled gradient step on held ones."""
    p = -g / np.maximum(np.diag(B), 1e-12)
    F = np.flatnonzero(free)
    if F.size:
        BF = B[np.ix_(F, F)] if F.size < B.shape[0] else B
        d = np.diag(BF).copy()
        tau = 0.0
        for _ in range(20):
            try:
                c = linalg.cho_factor(BF, lower=True, check_finite=False)
            except linalg.LinAlgError:
                tau = max(10.0 * tau, 1e-12 * float(d.max()))
                np.fill_diagonal(BF, d + tau)
                continue
            p[F] = -linalg.cho_solve(c, g[F], check_finite=False)
            break
    return p


_STALL_WINDOW = 25  # inner iterations over which the merit must keep moving
_STALL_RTOL = 1e-9


def _inner_solve(evaluate, x, e, merit: _Merit, model: _SecantModel, lo, hi, tol, max_iter):
    """Projected quasi-Newton descent on the merit over the box ``[lo, hi]``.

    Variables sitting at a bound with the gradient pushing outward are held
    (diagonal step); the rest take the quasi-Newton step. An Armijo search
    runs along the projection arc and falls back to the projected gradient.
    """
    fixed = lo == hi
    phi = merit.value(e)
    trail = [phi]
    nit = 0
    while nit < max_iter:
        if len(trail) > _STALL_WINDOW and trail[-_STALL_WINDOW - 1] - phi <= _STALL_RTOL * max(1.0, abs(phi)):
            break
        g = merit.grad(e)
        pg = projected_gradient(x, g, lo, hi)
        pg[fixed] = 0.0
        if np.abs(pg).max(initial=0.0) <= tol:
            break
        nit += 1
        gap = min(1e-3, float(np.abs(pg).max()))
        held = ((x <= lo + gap) & (g > 0)) | ((x >= hi - gap) & (g < 0)) | fixed
        p = _search_direction(_curvature(e, merit, model), g, ~held)
        p[fixed] = 0.0
        step = None
        for direction in (p, -pg):
            alpha = 1.0
            for _ in range(40):
                xt = np.clip(x + alpha * direction, lo, hi)
                slope = float(g @ (xt - x))
                if slope < 0.0:
                    phit = merit.value(evaluate(xt, False))
                    if phit <= phi + 1e-4 * slope:
                        step = (xt, evaluate(xt), phit)
                        break
                alpha *= 0.5
            if step is not None:
                break
        if step is None:
            break
        xt, et, phit = step
        ye, s = merit.weights(et)
        model.update(xt - x, _weighted_grad(et, ye, s) - _weighted_grad(e, ye, s))
        x, e, phi = step
        trail.append(phi)
    return x, e, phi, nit


def minimize_auglag(nlp: Nlp, x0, options: SolverOptions | None = None) -> NlpResult:
    opts = options or SolverOptions()
    lo, hi = nlp.lower, nlp.upper
    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    counter = {"evals": 0}

    def evaluate(z, derivatives=True):
        counter["evals"] += 1
        return nlp.evaluate(z, derivatives)

    ev = evaluate(x)
    y = np.zeros(ev.c_eq.size)
    mu = np.zeros(ev.c_in.size)
    rho = opts.penalty_init
    omega = max(opts.inner_tol_init, opts.opt_tol)
    v_prev = np.inf
    model = _SecantModel(x.size)
    history: list[tuple[float, float]] = []
    inner_total = 0
    converged = False
    best = (np.inf, np.inf, x.copy(), ev)
    message = "iteration limit reached"
    outer = 0
    f_trail: list[float] = []

    for outer in range(opts.max_outer + 1):
        viol = ev.max_violation()
        pg = float(np.abs(projected_gradient(x, _lagrangian_grad(ev, y, mu), lo, hi)).max(initial=0.0))
        key = (max(viol - opts.feas_tol, 0.0), ev.f)
        if key < best[:2]:
            best = (key[0], key[1], x.copy(), ev)
        log.debug("outer %d: f=%.6g viol=%.3e pg=%.3e rho=%.1e", outer, ev.f, viol, pg, rho)
        if viol <= opts.feas_tol and pg <= opts.opt_tol:
            converged = True
            message = "converged"
            best = (0.0, ev.f, x.copy(), ev)
            break
        if outer == opts.max_outer:
            break
        if viol <= opts.feas_tol and len(f_trail) >= 2 and all(
                abs(ev.f - fp) <= 1e-8 * max(1.0, abs(ev.f)) for fp in f_trail[-2:]):
            message = "stalled at a feasible point"
            break
        f_trail.append(ev.f)

        merit = _Merit(y, mu, rho)
        m0 = merit.value(ev)
        xn, evn, m1, nit = _inner_solve(evaluate, x, ev, merit, model, lo, hi, omega, opts.max_inner)
        inner_total += nit
        if m1 < m0:
            x, ev = xn, evn
        else:
            m1 = m0
        history.append((float(m0), float(m1)))

        # safeguarded first-order multiplier update; the penalty grows only when feasibility stalls
        if ev.c_in.size:
            comp = np.maximum(ev.c_in, -mu / rho)
        else:
            comp = np.empty(0)
        v = max(float(np.abs(ev.c_eq).max(initial=0.0)), float(np.abs(comp).max(initial=0.0)))
        y = np.clip(y + rho * ev.c_eq, -opts.multiplier_max, opts.multiplier_max)
        mu = np.clip(mu + rho * ev.c_in, 0.0, opts.multiplier_max)
        if v > opts.feas_tol and v > opts.progress_ratio * v_prev:
            rho = min(rho * opts.penalty_growth, opts.penalty_max)
        v_prev = v
        omega = max(opts.opt_tol, 0.1 * omega)

    _, _, xb, evb = best
    viol = evb.max_violation()
    pg = float(np.abs(projected_gradient(xb, _lagrangian_grad(evb, y, mu), lo, hi)).max(initial=0.0))
    return NlpResult(
        x=xb, f=float(evb.f), max_violation=viol, pg_norm=pg, converged=converged,
        outer_iterations=outer, inner_iterations=inner_total, evaluations=counter["evals"],
        multipliers_eq=y, multipliers_in=mu, merit_history=history, message=message,
    )


def gradient_check(nlp: Nlp, point, n_coords: int = 20, step: float = 1e-6,
                   rng: np.random.Generator | None = None) -> float:
    """Max relative error between the solver's derivatives and central differences.

    Compares the objective gradient and every constraint Jacobian column at
    ``n_coords`` random coordinates. Errors are scaled by ``max(1, |a|, |b|)``.
    """
    rng = rng or np.random.default_rng(0)
    x = np.asarray(point, dtype=float)
    ev = nlp.evaluate(x, derivatives=True)
    coords = rng.choice(x.size, size=min(n_coords, x.size), replace=False)
    Jeq = ev.J_eq.tocsc() if ev.c_eq.size else None
    Jin = ev.J_in.tocsc() if ev.c_in.size else None
    worst = 0.0
    for j in coords:
        h = step * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        ep = nlp.evaluate(x + e, derivatives=False)
        em = nlp.evaluate(x - e, derivatives=False)
        pairs = [(np.array([ev.grad[j]]), np.array([(ep.f - em.f) / (2 * h)]))]
        if Jeq is not None:
            pairs.append((Jeq[:, j].toarray().ravel(), (ep.c_eq - em.c_eq) / (2 * h)))
        if Jin is not None:
            pairs.append((Jin[:, j].toarray().ravel(), (ep.c_in - em.c_in) / (2 * h)))
        for a, b in pairs:
            scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
            err = np.abs(a - b) / scale
            if err.size:
                worst = max(worst, float(np.nan_to_num(err, nan=np.inf).max()))
    return worst
