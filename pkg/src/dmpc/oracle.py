"""Centralized reference solutions.

:func:`centralized_ocp` assembles the formation OCP over all robots at once,
directly from the cost blocks, without copies or the per-robot cost split.
:func:`solve_sqp` solves any :class:`QuadraticNLP` with a full-step SQP
using the regularized exact Hessian; a problem without distance rows is a
convex QP and takes a single step. :func:`stack_partial_nlp` expresses a
:class:`PartialNLP` centrally, with the consensus rows as equalities, which
gives KKT points in the split variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

from .problem import (
    DEFAULT_SOFT_PENALTY,
    ConstraintSet,
    DistanceRow,
    PartialNLP,
    QuadraticNLP,
    RobotModel,
    StageCost,
    assemble_centralized_weights,
)
from .qp import QPSolver, QPStatus

__all__ = [
    "CentralOCP",
    "OracleResult",
    "StackedNLP",
    "centralized_ocp",
    "centralized_oracle",
    "regularize_hessian",
    "residual_infnorm",
    "solve_sqp",
    "stack_partial_nlp",
]


def regularize_hessian(M, eps: float = 1e-4) -> np.ndarray:
    """Flip negative eigenvalues; eigenvalues in ``[-eps, eps]`` become ``eps``."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise np.linalg.LinAlgError("Hessian has non-finite entries")
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    fixed = np.where(np.abs(vals) <= eps, eps, np.abs(vals))
    out = (vecs * fixed) @ vecs.T
    return 0.5 * (out + out.T)


@dataclass
class CentralOCP(QuadraticNLP):
    """Formation OCP in ``(x_i, u_i, s_i)`` per robot; ``u_index[i][k]`` locates ``u_i^k``."""

    u_index: list | None = None
    x_index: list | None = None


def centralized_ocp(models: Sequence[RobotModel], costs: Sequence[StageCost],
                    constraints: Sequence[ConstraintSet], N: int, x_now, u_now, xbar=None,
                    soft_penalty: float = DEFAULT_SOFT_PENALTY, literal_distance: bool = False) -> CentralOCP:
    S = len(models)
    nx = [m.state_dim for m in models]
    nu = [m.input_dim for m in models]
    x_now = np.asarray(x_now, dtype=float).reshape(S, -1)
    u_now = np.asarray(u_now, dtype=float).reshape(S, -1)
    xbar = np.array([c.xbar for c in costs]) if xbar is None else np.asarray(xbar, dtype=float)
    has_slack = [cs.has_soft_rows for cs in constraints]

    # variable order: all x^k stage-major, then all u^k stage-major, then slacks
    X = sum(nx)
    U = sum(nu)
    ox = np.concatenate([[0], np.cumsum(nx)])
    ou = np.concatenate([[0], np.cumsum(nu)])
    n_x, n_u = (N + 1) * X, N * U
    slack_idx, n = {}, n_x + n_u
    for i in range(S):
        if has_slack[i]:
            slack_idx[i] = n
            n += 1
    x_index = [[np.arange(k * X + ox[i], k * X + ox[i + 1]) for k in range(N + 1)] for i in range(S)]
    u_index = [[np.arange(n_x + k * U + ou[i], n_x + k * U + ou[i + 1]) for k in range(N)] for i in range(S)]

    Q, R, P = assemble_centralized_weights(costs)
    H = np.zeros((n, n))
    for k in range(N + 1):
        blk = slice(k * X, (k + 1) * X)
        H[blk, blk] = Q if k < N else P
    for k in range(N):
        blk = slice(n_x + k * U, n_x + (k + 1) * U)
        H[blk, blk] = R
    for i, s in slack_idx.items():
        H[s, s] = 2.0 * soft_penalty
    zref = np.zeros(n)
    for i in range(S):
        for k in range(N + 1):
            zref[x_index[i][k]] = xbar[i]
        for k in range(N):
            zref[u_index[i][k]] = costs[i].ubar
    grad = -H @ zref

    eq_rows, eq_rhs = [], []
    for i in range(S):
        dt = models[i].dt
        for k in range(N):
            A = np.zeros((nx[i], n))
            A[:, x_index[i][k + 1]] = np.eye(nx[i])
            A[:, x_index[i][k]] = -np.eye(nx[i])
            A[:, u_index[i][k]] = -dt * np.eye(nu[i])
            eq_rows.append(A)
            eq_rhs.append(np.zeros(nx[i]))
        A = np.zeros((nx[i], n))
        A[:, x_index[i][0]] = np.eye(nx[i])
        eq_rows.append(A)
        eq_rhs.append(x_now[i])
        A = np.zeros((nu[i], n))
        A[:, u_index[i][0]] = np.eye(nu[i])
        eq_rows.append(A)
        eq_rhs.append(u_now[i])

    lin_rows, lin_rhs, dist_rows = [], [], []
    for i, cs in enumerate(constraints):
        for k in range(1, N):
            A = np.zeros((2 * nu[i], n))
            A[:nu[i], u_index[i][k]] = np.eye(nu[i])
            A[nu[i]:, u_index[i][k]] = -np.eye(nu[i])
            lin_rows.append(A)
            lin_rhs.append(np.concatenate([cs.input_upper, -cs.input_lower]))
        if cs.state_lower is not None:
            for k in range(1, N + 1):
                A = np.zeros((2 * nx[i], n))
                A[:nx[i], x_index[i][k]] = np.eye(nx[i])
                A[nx[i]:, x_index[i][k]] = -np.eye(nx[i])
                lin_rows.append(A)
                lin_rhs.append(np.concatenate([cs.state_upper, -cs.state_lower]))
        if has_slack[i]:
            A = np.zeros((1, n))
            A[0, slack_idx[i]] = -1.0
            lin_rows.append(A)
            lin_rhs.append(np.zeros(1))
    for i, cs in enumerate(constraints):
        for pair in cs.pairs:
            bound = pair.min_distance if literal_distance else pair.min_distance ** 2
            for k in range(N + 1):
                dist_rows.append(DistanceRow(k, pair.neighbor, x_index[i][k], x_index[pair.neighbor][k],
                                             float(bound), slack_idx[i] if pair.soft else None))

    return CentralOCP(
        H=H, grad=grad,
        A_eq=np.vstack(eq_rows), b_eq=np.concatenate(eq_rhs),
        A_lin=np.vstack(lin_rows) if lin_rows else np.zeros((0, n)),
        b_lin=np.concatenate(lin_rhs) if lin_rhs else np.zeros(0),
        distance_rows=tuple(dist_rows), u_index=u_index, x_index=x_index,
    )


@dataclass
class StackedNLP(QuadraticNLP):
    """Centralized view of a :class:`PartialNLP`; the last ``n_coupling`` equalities are ``E z = 0``.

    The split objective is only positive semidefinite, so QP solves add
    ``augmentation = E'E``. It vanishes on the feasible set and changes
    neither the solution nor the multipliers.
    """

    offsets: list | None = None
    n_coupling: int = 0
    augmentation: np.ndarray | None = None


def stack_partial_nlp(nlp: PartialNLP) -> StackedNLP:
    offsets = nlp.offsets
    subs = nlp.subsystems
    n = offsets[-1]

    def shifted(row: DistanceRow, off: int) -> DistanceRow:
        return DistanceRow(row.stage, row.neighbor, row.x_idx + off, row.w_idx + off, row.bound,
                           None if row.slack is None else row.slack + off)

    E = nlp.E
    return StackedNLP(
        H=block_diag(*[s.H for s in subs]),
        grad=np.concatenate([s.grad for s in subs]),
        A_eq=np.vstack([block_diag(*[s.A_eq for s in subs]).reshape(-1, n), E]),
        b_eq=np.concatenate([s.b_eq for s in subs] + [np.zeros(E.shape[0])]),
        A_lin=block_diag(*[s.A_lin for s in subs]).reshape(-1, n),
        b_lin=np.concatenate([s.b_lin for s in subs]),
        distance_rows=tuple(shifted(r, offsets[i]) for i, s in enumerate(subs) for r in s.distance_rows),
        offsets=offsets,
        n_coupling=E.shape[0],
        augmentation=E.T @ E,
    )


@dataclass
class SQPResult:
    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    converged: bool
    iterations: int
    kkt: float


def kkt_infnorm(problem: QuadraticNLP, z, nu, mu) -> float:
    """Stationarity, primal feasibility and complementarity in the infinity norm."""
    g, Jg = problem.eq(z)
    h, Jh = problem.ineq(z)
    stat = problem.gradient(z) + Jg.T @ nu + Jh.T @ mu
    parts = [np.abs(stat), np.abs(g), np.maximum(h, 0.0), np.abs(mu * h), np.maximum(-mu, 0.0)]
    return float(max((p.max(initial=0.0) for p in parts), default=0.0))


def solve_sqp(problem: QuadraticNLP, z0=None, tol: float = 1e-9, max_iter: int = 100,
              eps: float = 1e-4) -> SQPResult:
    """Full-step SQP with regularized exact Hessians and warm-started QP solves."""
    n = problem.n
    z = np.zeros(n) if z0 is None else np.array(z0, dtype=float, copy=True)
    nu = np.zeros(problem.n_eq)
    mu = np.zeros(problem.n_ineq)
    warm = None
    shift = getattr(problem, "augmentation", None)
    shift = np.zeros((n, n)) if shift is None else shift
    if problem.is_qp:
        solver = QPSolver(problem.H + shift, problem.A_eq, problem.A_lin, tol=min(tol, 1e-8))
        sol = solver.solve(problem.grad, problem.b_eq, problem.b_lin)
        ok = sol.status is QPStatus.OPTIMAL
        return SQPResult(sol.z, sol.lam_eq, sol.mu_in, ok, 1,
                         kkt_infnorm(problem, sol.z, sol.lam_eq, sol.mu_in))
    for it in range(1, max_iter + 1):
        g, Jg = problem.eq(z)
        h, Jh = problem.ineq(z)
        Hq = regularize_hessian(problem.lagrangian_hessian(mu) + shift, eps)
        solver = QPSolver(Hq, Jg, Jh, tol=min(tol, 1e-8))
        sol = solver.solve(problem.gradient(z), -g, -h, warm=warm)
        if sol.status is not QPStatus.OPTIMAL:
            return SQPResult(z, nu, mu, False, it, np.inf)
        z = z + sol.z
        nu, mu, warm = sol.lam_eq, sol.mu_in, sol
        res = kkt_infnorm(problem, z, nu, mu)
        if res <= tol:
            return SQPResult(z, nu, mu, True, it, res)
    return SQPResult(z, nu, mu, False, max_iter, kkt_infnorm(problem, z, nu, mu))


@dataclass
class OracleResult:
    u_next: np.ndarray
    z: np.ndarray
    converged: bool
    iterations: int


class CentralizedOracle:
    """Solves the centralized OCP each step, warm-started from the previous solution."""

    def __init__(self, models, costs, constraints, N, soft_penalty=DEFAULT_SOFT_PENALTY,
                 literal_distance=False, tol: float = 1e-9, max_iter: int = 100):
        self.args = (models, costs, constraints, N)
        self.soft_penalty = soft_penalty
        self.literal = literal_distance
        self.tol = tol
        self.max_iter = max_iter
        self._prev: np.ndarray | None = None

    def __call__(self, x_now, u_now, xbar) -> OracleResult:
        ocp = centralized_ocp(*self.args, x_now, u_now, xbar, self.soft_penalty, self.literal)
        z0 = self._shifted_guess(ocp, x_now, u_now)
        res = solve_sqp(ocp, z0, tol=self.tol, max_iter=self.max_iter)
        if res.converged:
            self._prev = res.z
        u_next = np.array([res.z[idx[1]] for idx in ocp.u_index])
        return OracleResult(u_next, res.z, res.converged, res.iterations)

    def _shifted_guess(self, ocp: CentralOCP, x_now, u_now):
        n = ocp.n
        N = self.args[3]
        z = np.zeros(n)
        prev = self._prev
        for i, xs in enumerate(ocp.x_index):
            for k in range(N + 1):
                z[xs[k]] = x_now[i] if prev is None else prev[xs[min(k + 1, N)]]
            z[xs[0]] = x_now[i]
        for i, us in enumerate(ocp.u_index):
            for k in range(N):
                z[us[k]] = 0.0 if prev is None else prev[us[min(k + 1, N - 1)]]
            z[us[0]] = u_now[i]
        first_slack = ocp.u_index[-1][-1][-1] + 1
        if prev is not None:
            z[first_slack:] = prev[first_slack:]
        return z


def centralized_oracle(models, costs, constraints, N, x_now, u_now, xbar=None, **kwargs) -> OracleResult:
    """One-shot oracle: ``u^1`` of every robot and the full centralized solution."""
    oracle = CentralizedOracle(models, costs, constraints, N, **kwargs)
    return oracle(np.asarray(x_now, dtype=float), np.asarray(u_now, dtype=float),
                  np.array([c.xbar for c in costs]) if xbar is None else xbar)


def residual_infnorm(u_applied, u_oracle) -> float:
    diff = np.asarray(u_applied, dtype=float) - np.asarray(u_oracle, dtype=float)
    return float(np.abs(diff).max(initial=0.0))
