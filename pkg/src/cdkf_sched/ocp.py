"""Direct-collocation transcription of the rate/input planning problem.

Decision variables per grid node ``k`` (stored node-major):

    u_k (m_u) | lambda_k (S) | eps_k (slack_dim) | xi_k (n_xi) | vech(L_k) (n(n+1)/2)

with ``Sigma_k = L_k L_k^T`` and ``L_k`` lower triangular. Dynamics enter as
forward-Euler defects on ``xi`` and on the upper triangle of ``Sigma``.

Cost and constraint callbacks are vectorized: they receive stacks
``xi (B, n_xi)``, ``Sigma (B, n, n)``, ``u (B, m_u)``, ``lam (B, S)``,
``eps (B, slack_dim)``, ``t (B,)`` and return ``(B,)`` costs or
``(B, n_c)`` constraint values (feasible when ``<= 0``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import sparse

from .auglag import Nlp, NlpEval, NlpResult, SolverOptions, minimize_auglag
from .bounds import BoundTrajectory, aux_rhs_batch, sigma_rhs_batch
from .model import AuxModel, ProcessModel, RatePlan, Sensor, TimeGrid, clamp_psd, symmetrize

__all__ = [
    "DecisionVector",
    "OcpSolution",
    "OcpSpec",
    "TranscribedOcp",
    "TranscriptionError",
    "extract_plan",
    "node_rates_to_plan",
    "solve_nlp",
    "transcribe",
]

CHOL_FLOOR = 1e-8
_FD_REL = np.cbrt(np.finfo(float).eps)


class TranscriptionError(ValueError):
    pass


@dataclass(frozen=True)
class OcpSpec:
    running_cost: Callable
    u_lower: np.ndarray
    u_upper: np.ndarray
    terminal_cost: Optional[Callable] = None
    running_constraints: Optional[Callable] = None
    n_running: int = 0
    running_mask: Optional[Callable] = None
    terminal_constraints: Optional[Callable] = None
    n_terminal: int = 0
    rate_upper: Optional[float] = None
    slack_dim: int = 0
    weights: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.u_lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.u_upper, dtype=float))
        if lo.shape != hi.shape or np.any(lo > hi):
            raise TranscriptionError("input box bounds must be ordered and of equal length")
        if any(w < 0 for w in self.weights.values()):
            raise TranscriptionError("cost weights must be nonnegative")
        if self.rate_upper is not None and self.rate_upper < 0:
            raise TranscriptionError("rate cap must be nonnegative")
        object.__setattr__(self, "u_lower", lo)
        object.__setattr__(self, "u_upper", hi)


@dataclass
class DecisionVector:
    u: np.ndarray  # (N, m_u)
    lam: np.ndarray  # (N, S)
    eps: np.ndarray  # (N, slack_dim)
    xi: np.ndarray  # (N, n_xi)
    L: np.ndarray  # (N, n, n), lower triangular

    @property
    def sigma(self) -> np.ndarray:
        return self.L @ np.swapaxes(self.L, -1, -2)


class TranscribedOcp(Nlp):
    """The transcribed NLP; implements :class:`~cdkf_sched.auglag.Nlp`."""

    def __init__(self, spec: OcpSpec, process: ProcessModel, aux: AuxModel,
                 sensors: Sequence[Sensor], grid: TimeGrid, sigma0, xi0):
        if len(grid) < 3:
            raise TranscriptionError("the grid needs at least 3 nodes")
        if spec.u_lower.size != aux.m_u:
            raise TranscriptionError(f"input box has {spec.u_lower.size} entries, aux model expects {aux.m_u}")
        self.spec, self.process, self.aux, self.sensors, self.grid = spec, process, aux, list(sensors), grid
        n = process.n
        self.N = len(grid)
        self.nS = len(self.sensors)
        self.m = aux.m_u
        self.ns = spec.slack_dim
        self.n_xi = aux.n_xi
        self.nstate = n
        self.tril = np.tril_indices(n)
        self.triu = np.triu_indices(n)
        self.nL = len(self.tril[0])
        o = np.cumsum([0, self.m, self.nS, self.ns, self.n_xi, self.nL])
        self.sl_u, self.sl_lam, self.sl_eps, self.sl_xi, self.sl_L = (
            slice(o[i], o[i + 1]) for i in range(5))
        self.d = int(o[-1])
        self.n = self.N * self.d
        self.ds = self.n_xi + self.nL  # size of one defect block
        self.h = grid.steps
        self.t = grid.nodes
        w = np.zeros(self.N)
        w[:-1] += 0.5 * self.h
        w[1:] += 0.5 * self.h
        self.node_weights = w

        sigma0 = symmetrize(np.atleast_2d(np.asarray(sigma0, dtype=float)))
        if sigma0.shape != (n, n):
            raise TranscriptionError(f"initial covariance has shape {sigma0.shape}, expected {(n, n)}")
        self.sigma0 = sigma0
        self.xi0 = np.asarray(xi0, dtype=float).reshape(-1)
        if self.xi0.size != self.n_xi:
            raise TranscriptionError(f"initial auxiliary state has {self.xi0.size} entries, expected {self.n_xi}")
        self.L0 = _safe_cholesky(sigma0)

        lo = np.full((self.N, self.d), -np.inf)
        hi = np.full((self.N, self.d), np.inf)
        lo[:, self.sl_u], hi[:, self.sl_u] = spec.u_lower, spec.u_upper
        lo[:, self.sl_lam] = 0.0
        if spec.rate_upper is not None:
            hi[:, self.sl_lam] = spec.rate_upper
        lo[:, self.sl_eps] = 0.0
        diag = [i for i, (r, c) in enumerate(zip(*self.tril)) if r == c]
        lo[:, self.sl_L.start + np.array(diag)] = CHOL_FLOOR
        lo[0, self.sl_xi] = hi[0, self.sl_xi] = self.xi0
        lo[0, self.sl_L] = hi[0, self.sl_L] = self.L0[self.tril]
        self.lower, self.upper = lo.ravel(), hi.ravel()

        if spec.running_constraints is not None and spec.n_running:
            mask = np.ones((self.N, spec.n_running), dtype=bool)
            if spec.running_mask is not None:
                mask = np.array([np.broadcast_to(spec.running_mask(t), (spec.n_running,))
                                 for t in self.t], dtype=bool)
        else:
            mask = np.zeros((self.N, 0), dtype=bool)
        self.mask = mask
        self.n_eq = (self.N - 1) * self.ds
        self.n_term = spec.n_terminal if spec.terminal_constraints is not None else 0
        self.n_in = int(mask.sum()) + self.n_term
        self._build_patterns()

    # -- layout -----------------------------------------------------------
    def pack(self, dv: DecisionVector) -> np.ndarray:
        Z = np.empty((self.N, self.d))
        Z[:, self.sl_u] = np.reshape(dv.u, (self.N, self.m))
        Z[:, self.sl_lam] = np.reshape(dv.lam, (self.N, self.nS))
        Z[:, self.sl_eps] = np.reshape(dv.eps, (self.N, self.ns))
        Z[:, self.sl_xi] = np.reshape(dv.xi, (self.N, self.n_xi))
        Z[:, self.sl_L] = dv.L[:, self.tril[0], self.tril[1]]
        return Z.ravel()

    def unpack(self, x) -> DecisionVector:
        Z = np.asarray(x, dtype=float).reshape(self.N, self.d)
        return DecisionVector(
            u=Z[:, self.sl_u].copy(), lam=Z[:, self.sl_lam].copy(), eps=Z[:, self.sl_eps].copy(),
            xi=Z[:, self.sl_xi].copy(), L=self._lower(Z[:, self.sl_L]),
        )

    def _lower(self, Lv):
        L = np.zeros(Lv.shape[:-1] + (self.nstate, self.nstate))
        L[..., self.tril[0], self.tril[1]] = Lv
        return L

    # -- node-local functions -------------------------------------------
    def _node_fn(self, Z, t):
        """Batched node quantities: state map, dynamics, running cost, running constraints."""
        u, lam, eps, xi = Z[:, self.sl_u], Z[:, self.sl_lam], Z[:, self.sl_eps], Z[:, self.sl_xi]
        L = self._lower(Z[:, self.sl_L])
        S = L @ np.swapaxes(L, -1, -2)
        r, c = self.triu
        state = np.concatenate([xi, S[:, r, c]], axis=1)
        dS = sigma_rhs_batch(S, xi, lam, self.sensors, self.process, t)
        dxi = aux_rhs_batch(xi, u, lam, self.aux, self.sensors, t)
        dyn = np.concatenate([dxi, dS[:, r, c]], axis=1)
        cost = np.broadcast_to(self.spec.running_cost(xi, S, u, lam, eps, t), t.shape)
        if self.mask.shape[1]:
            cons = np.asarray(self.spec.running_constraints(xi, S, u, lam, eps, t), dtype=float)
            cons = np.broadcast_to(cons, t.shape + (self.mask.shape[1],))
        else:
            cons = np.zeros(t.shape + (0,))
        return state, dyn, cost, cons

    def _terminal_fn(self, Z, t):
        u, lam, eps, xi = Z[:, self.sl_u], Z[:, self.sl_lam], Z[:, self.sl_eps], Z[:, self.sl_xi]
        L = self._lower(Z[:, self.sl_L])
        S = L @ np.swapaxes(L, -1, -2)
        cost = (np.broadcast_to(self.spec.terminal_cost(xi, S, u, lam, eps, t), t.shape)
                if self.spec.terminal_cost is not None else np.zeros(t.shape))
        if self.n_term:
            cons = np.broadcast_to(np.asarray(self.spec.terminal_constraints(xi, S, u, lam, eps, t), dtype=float),
                                   t.shape + (self.n_term,))
        else:
            cons = np.zeros(t.shape + (0,))
        return cost, cons

    def _with_fd(self, fn, Z, t):
        """Evaluate ``fn`` and its central-difference Jacobians w.r.t. the node variables in one batch."""
        B, d = Z.shape
        hstep = _FD_REL * np.maximum(1.0, np.abs(Z))  # (B, d)
        stack = np.repeat(Z[None], 2 * d + 1, axis=0)  # (2d+1, B, d)
        idx = np.arange(d)
        stack[1 + idx, :, idx] += hstep.T
        stack[1 + d + idx, :, idx] -= hstep.T
        outs = fn(stack.reshape(-1, d), np.tile(t, 2 * d + 1))
        vals, jacs = [], []
        for o in outs:
            o = np.asarray(o).reshape((2 * d + 1, B) + o.shape[1:])
            vals.append(o[0])
            diff = (o[1:d + 1] - o[d + 1:]) / (2.0 * hstep.T.reshape((d, B) + (1,) * (o.ndim - 2)))
            jacs.append(np.moveaxis(diff, 0, -1))  # (B, ..., d)
        return vals, jacs

    # -- sparsity patterns -------------------------------------------------
    def _build_patterns(self):
        N, d, ds = self.N, self.d, self.ds
        k = np.arange(N - 1)
        rows = (k[:, None, None] * ds + np.arange(ds)[None, :, None]) * np.ones((1, 1, d), int)
        cols_next = ((k + 1)[:, None, None] * d + np.arange(d)[None, None, :]) * np.ones((1, ds, 1), int)
        cols_here = (k[:, None, None] * d + np.arange(d)[None, None, :]) * np.ones((1, ds, 1), int)
        self._eq_rows = np.concatenate([rows.ravel(), rows.ravel()])
        self._eq_cols = np.concatenate([cols_next.ravel(), cols_here.ravel()])
        nodes, which = np.nonzero(self.mask)
        nr = nodes.size
        in_rows = [np.repeat(np.arange(nr), d)]
        in_cols = [(nodes[:, None] * d + np.arange(d)[None, :]).ravel()]
        if self.n_term:
            in_rows.append(np.repeat(nr + np.arange(self.n_term), d))
            in_cols.append(np.tile((N - 1) * d + np.arange(d), self.n_term))
        self._in_rows = np.concatenate(in_rows)
        self._in_cols = np.concatenate(in_cols)
        self._mask_nodes, self._mask_which = nodes, which

    # -- Nlp interface -----------------------------------------------------
    def evaluate(self, x, derivatives: bool = True) -> NlpEval:
        Z = np.asarray(x, dtype=float).reshape(self.N, self.d)
        zT = Z[-1:]
        tT = self.t[-1:]
        if derivatives:
            (state, dyn, cost, cons), (Jst, Jdyn, Jcost, Jcons) = self._with_fd(self._node_fn, Z, self.t)
            (tcost, tcons), (Jtcost, Jtcons) = self._with_fd(self._terminal_fn, zT, tT)
        else:
            state, dyn, cost, cons = self._node_fn(Z, self.t)
            tcost, tcons = self._terminal_fn(zT, tT)
        h = self.h[:, None]
        c_eq = (state[1:] - state[:-1] - h * dyn[:-1]).ravel()
        running = cons[self._mask_nodes, self._mask_which]
        c_in = np.concatenate([running, tcons[0]])
        f = float(self.node_weights @ cost + tcost[0])
        ev = NlpEval(f, c_eq, c_in)
        if not derivatives:
            return ev
        g = self.node_weights[:, None] * Jcost
        g[-1] += Jtcost[0]
        ev.grad = g.ravel()
        next_blk = Jst[1:]
        here_blk = -Jst[:-1] - self.h[:, None, None] * Jdyn[:-1]
        data = np.concatenate([next_blk.ravel(), here_blk.ravel()])
        ev.J_eq = sparse.csr_matrix((data, (self._eq_rows, self._eq_cols)), shape=(self.n_eq, self.n))
        in_data = [Jcons[self._mask_nodes, self._mask_which].ravel()]
        if self.n_term:
            in_data.append(Jtcons[0].ravel())
        ev.J_in = sparse.csr_matrix((np.concatenate(in_data), (self._in_rows, self._in_cols)),
                                    shape=(self.n_in, self.n))
        return ev

    # -- helpers -------------------------------------------------------------
    def rollout(self, node_rates, node_inputs, node_slack=None) -> DecisionVector:
        """Explicit-Euler roll-forward of the bound dynamics for given node controls."""
        N = self.N
        lam = np.broadcast_to(np.asarray(node_rates, dtype=float), (N, self.nS)).copy()
        u = np.broadcast_to(np.asarray(node_inputs, dtype=float), (N, self.m)).copy()
        eps = (np.zeros((N, self.ns)) if node_slack is None
               else np.broadcast_to(np.asarray(node_slack, dtype=float), (N, self.ns)).copy())
        xi = np.empty((N, self.n_xi))
        L = np.empty((N, self.nstate, self.nstate))
        xi[0], L[0] = self.xi0, self.L0
        S = self.L0 @ self.L0.T
        for k in range(N - 1):
            t = self.t[k]
            dS = sigma_rhs_batch(S, xi[k], lam[k], self.sensors, self.process, t)
            dxi = aux_rhs_batch(xi[k], u[k], lam[k], self.aux, self.sensors, t)
            xi[k + 1] = xi[k] + self.h[k] * dxi
            S = symmetrize(S + self.h[k] * dS)
            L[k + 1] = _safe_cholesky(S)
            S = L[k + 1] @ L[k + 1].T
        return DecisionVector(u, lam, eps, xi, L)

    def initial_guess(self, rate: float = 1.0) -> DecisionVector:
        u_mid = 0.5 * (self.spec.u_lower + self.spec.u_upper)
        u_mid = np.where(np.isfinite(u_mid), u_mid, np.clip(0.0, self.spec.u_lower, self.spec.u_upper))
        r = rate if self.spec.rate_upper is None else min(rate, self.spec.rate_upper)
        return self.rollout(np.full(self.nS, r), u_mid)


def _safe_cholesky(S):
    S = symmetrize(np.atleast_2d(S))
    n = S.shape[0]
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        S = clamp_psd(S) + CHOL_FLOOR**2 * np.eye(n)
        L = np.linalg.cholesky(S)
    d = np.diag(L)
    if np.any(d < CHOL_FLOOR):
        L[np.diag_indices(n)] = np.maximum(d, CHOL_FLOOR)
    return L


def transcribe(spec: OcpSpec, process: ProcessModel, aux: AuxModel, sensors: Sequence[Sensor],
               grid: TimeGrid, sigma0, xi0) -> TranscribedOcp:
    return TranscribedOcp(spec, process, aux, sensors, grid, sigma0, xi0)


def node_rates_to_plan(grid: TimeGrid, node_rates) -> RatePlan:
    """Interval rates from node rates by the left-node convention; round-off negatives become 0."""
    node_rates = np.asarray(node_rates, dtype=float)
    if node_rates.ndim == 1:
        node_rates = node_rates[:, None]
    return RatePlan(grid, np.maximum(node_rates[:-1].T, 0.0))


@dataclass
class OcpSolution:
    rate_plan: RatePlan
    input_plan: np.ndarray  # (N-1, m_u)
    slack: np.ndarray  # (N, slack_dim)
    bounds: BoundTrajectory
    decision: DecisionVector
    result: NlpResult

    @property
    def converged(self) -> bool:
        return self.result.converged

    def diagnostics(self) -> dict:
        r = self.result
        return {
            "converged": bool(r.converged),
            "objective": r.f,
            "max_violation": r.max_violation,
            "projected_gradient": r.pg_norm,
            "outer_iterations": r.outer_iterations,
            "inner_iterations": r.inner_iterations,
            "evaluations": r.evaluations,
            "message": r.message,
            "heuristic": bool(self.bounds.heuristic),
        }


def extract_plan(sol: OcpSolution | DecisionVector, grid: TimeGrid | None = None):
    """``(RatePlan, input plan)`` from a solution (or a raw decision vector plus grid)."""
    if isinstance(sol, OcpSolution):
        dv, grid = sol.decision, sol.rate_plan.grid
    else:
        dv = sol
    return node_rates_to_plan(grid, dv.lam), np.asarray(dv.u[:-1], dtype=float)


def solve_nlp(nlp: Nlp, init=None, opts: SolverOptions | None = None):
    """Solve an NLP with the augmented-Lagrangian method.

    For a :class:`TranscribedOcp` the result is an :class:`OcpSolution` and
    ``init`` may be a :class:`DecisionVector` (default: the rate-1 roll-out);
    for any other :class:`Nlp` the raw :class:`NlpResult` is returned.
    """
    if isinstance(nlp, TranscribedOcp):
        dv = nlp.initial_guess() if init is None else init
        x0 = nlp.pack(dv) if isinstance(dv, DecisionVector) else np.asarray(dv, dtype=float)
        res = minimize_auglag(nlp, x0, opts)
        best = nlp.unpack(res.x)
        plan, inputs = extract_plan(best, nlp.grid)
        bounds = BoundTrajectory(nlp.grid, best.sigma, best.xi, nlp.aux.heuristic)
        return OcpSolution(plan, inputs, best.eps, bounds, best, res)
    return minimize_auglag(nlp, np.asarray(init, dtype=float), opts)
