"""Dense strictly convex QP solver with warm-started active sets.

Solves::

    minimize    0.5 z'Hz + g'z
    subject to  A_eq z  = b_eq
                A_in z <= b_in

with a dual active-set method in range-space form (Goldfarb-Idnani). The
Cholesky factor of ``H`` is computed once per :class:`QPSolver`; every
working-set change only touches the small matrix ``A_W H^-1 A_W'``. A
previous solution can be passed as warm start, in which case its active set
seeds the working set and only the changes caused by new data are paid for.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular

__all__ = [
    "DenseQP",
    "QPSolution",
    "QPSolver",
    "QPStatus",
    "hotstart_update",
    "kkt_violation",
    "solve",
]


class QPStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"


def _rows(A, n):
    if A is None:
        return np.zeros((0, n))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((0, n))
    return A


def _vec(b, m):
    if b is None:
        return np.zeros(m)
    return np.asarray(b, dtype=float).reshape(m)


@dataclass
class DenseQP:
    """Problem data. Rows of ``A_in`` are read as ``A_in z <= b_in``."""

    H: np.ndarray
    g: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H must be square, got {self.H.shape}")
        if not np.allclose(self.H, self.H.T, rtol=1e-12, atol=1e-12):
            raise ValueError("H must be symmetric")
        self.g = _vec(self.g, n)
        self.A_eq = _rows(self.A_eq, n)
        self.A_in = _rows(self.A_in, n)
        self.b_eq = _vec(self.b_eq, self.A_eq.shape[0])
        self.b_in = _vec(self.b_in, self.A_in.shape[0])
        for name, A in (("A_eq", self.A_eq), ("A_in", self.A_in)):
            if A.shape[1] != n:
                raise ValueError(f"{name} has {A.shape[1]} columns, expected {n}")

    @property
    def n(self) -> int:
        return self.H.shape[0]


@dataclass
class QPSolution:
    z: np.ndarray
    lam_eq: np.ndarray
    mu_in: np.ndarray
    active_set: tuple[int, ...]
    status: QPStatus
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is QPStatus.OPTIMAL


@dataclass
class _WorkingSetMaps:
    # x = Gx g + Bx b_W ;  u = Gu g + Bu b_W ; step directions reuse Gx, Gu.
    Gx: np.ndarray
    Bx: np.ndarray
    Gu: np.ndarray
    Bu: np.ndarray


@dataclass
class QPSolver:
    """Active-set solver bound to fixed ``H``, ``A_eq`` and ``A_in``.

    Only ``g``, ``b_eq`` and ``b_in`` may change between calls, which is the
    situation of every subsystem QP inside a receding-horizon loop.
    """

    H: np.ndarray
    A_eq: np.ndarray
    A_in: np.ndarray
    tol: float = 1e-8
    cache_size: int = 64
    _maps: OrderedDict = field(default_factory=OrderedDict, init=False, repr=False)

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        n = self.H.shape[0]
        self.A_eq = _rows(self.A_eq, n)
        self.A_in = _rows(self.A_in, n)
        try:
            L = np.linalg.cholesky(self.H)
        except np.linalg.LinAlgError as exc:
            raise ValueError("H must be positive definite") from exc
        self._Linv = solve_triangular(L, np.eye(n), lower=True)
        self._A = np.vstack([self.A_eq, self.A_in])
        # columns of L^-1 A' for every constraint row
        self._Y = self._Linv @ self._A.T
        self._col_norm2 = np.einsum("ij,ij->j", self._Y, self._Y)
        self.n_eq = self.A_eq.shape[0]
        self.n_in = self.A_in.shape[0]

    @classmethod
    def for_qp(cls, qp: DenseQP, **kwargs) -> QPSolver:
        return cls(qp.H, qp.A_eq, qp.A_in, **kwargs)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def max_changes(self) -> int:
        return 10 * (self.n + self.n_eq + self.n_in)

    def _working_set_maps(self, W: tuple[int, ...]) -> _WorkingSetMaps | None:
        maps = self._maps.get(W)
        if maps is not None:
            self._maps.move_to_end(W)
            return maps
        n = self.n
        Linv = self._Linv
        if W:
            Y = self._Y[:, list(W)]
            try:
                cf = cho_factor(Y.T @ Y, lower=True)
            except LinAlgError:
                return None
            d = np.abs(np.diag(cf[0]))
            if d.min() <= 1e-7 * d.max():
                return None
            Minv = cho_solve(cf, np.eye(len(W)))
            YM = Y @ Minv
            Gx = -Linv.T @ (Linv - YM @ (Y.T @ Linv))
            Bx = Linv.T @ YM
            Gu = -Minv @ (Y.T @ Linv)
            Bu = -Minv
        else:
            Gx = -Linv.T @ Linv
            Bx = np.zeros((n, 0))
            Gu = np.zeros((0, n))
            Bu = np.zeros((0, 0))
        maps = _WorkingSetMaps(Gx, Bx, Gu, Bu)
        self._maps[W] = maps
        if len(self._maps) > self.cache_size:
            self._maps.popitem(last=False)
        return maps

    def _eqp(self, W, g, b):
        maps = self._working_set_maps(W)
        if maps is None:
            return None
        bW = b[list(W)] if W else np.zeros(0)
        return maps.Gx @ g + maps.Bx @ bW, maps.Gu @ g + maps.Bu @ bW

    def _finish(self, x, W, u, status, changes):
        lam = np.zeros(self.n_eq)
        mu = np.zeros(self.n_in)
        active = []
        for idx, val in zip(W, u):
            if idx < self.n_eq:
                lam[idx] = val
            else:
                mu[idx - self.n_eq] = max(val, 0.0)
                active.append(idx - self.n_eq)
        return QPSolution(x, lam, mu, tuple(active), status, changes)

    def _infeasible_equalities(self, b):
        z, *_ = np.linalg.lstsq(self.A_eq, b[: self.n_eq], rcond=None)
        resid = np.abs(self.A_eq @ z - b[: self.n_eq]).max(initial=0.0)
        if resid > self.tol * (1 + np.abs(b[: self.n_eq]).max(initial=0.0)):
            return QPSolution(z, np.zeros(self.n_eq), np.zeros(self.n_in), (), QPStatus.INFEASIBLE)
        raise ValueError("A_eq must have full row rank")

    def _start(self, g, b, warm):
        eq = tuple(range(self.n_eq))
        changes = 0
        if warm is not None and warm.active_set:
            W = eq + tuple(self.n_eq + j for j in sorted(warm.active_set))
            while len(W) > self.n_eq:
                sol = self._eqp(W, g, b)
                if sol is None:
                    break
                x, u = sol
                u_in = u[self.n_eq:]
                worst = int(np.argmin(u_in))
                if u_in[worst] >= -1e-12:
                    return W, x, u, changes
                W = W[: self.n_eq + worst] + W[self.n_eq + worst + 1:]
                changes += 1
        sol = self._eqp(eq, g, b)
        if sol is None:
            return None
        return eq, sol[0], sol[1], changes

    def solve(self, g, b_eq=None, b_in=None, warm: QPSolution | None = None) -> QPSolution:
        g = _vec(g, self.n)
        b = np.concatenate([_vec(b_eq, self.n_eq), _vec(b_in, self.n_in)])
        start = self._start(g, b, warm)
        if start is None:
            return self._infeasible_equalities(b)
        W, x, u, changes = start
        A_in = self.A_in
        b_in = b[self.n_eq:]
        feas_tol = 1e-10 * (1.0 + np.abs(b_in))
        in_W = np.zeros(self.n_in, dtype=bool)
        in_W[[w - self.n_eq for w in W[self.n_eq:]]] = True

        while True:
            viol = A_in @ x - b_in
            viol[in_W | (viol <= feas_tol)] = -np.inf
            if self.n_in == 0 or viol.max() == -np.inf:
                return self._finish(x, W, u, QPStatus.OPTIMAL, changes)
            p = int(np.argmax(viol))
            a = A_in[p]
            row = self.n_eq + p
            t_p = 0.0
            while True:
                if changes >= self.max_changes:
                    return self._finish(x, W, u, QPStatus.MAX_ITER, changes)
                maps = self._working_set_maps(W)
                dx = maps.Gx @ a
                du = maps.Gu @ a
                slope = a @ dx
                if -slope > 1e-12 * self._col_norm2[row]:
                    t_full = (a @ x - b[row]) / -slope
                else:
                    t_full = np.inf
                t_dual, block = np.inf, -1
                du_in = du[self.n_eq:]
                cand = np.flatnonzero(du_in < -1e-14)
                if cand.size:
                    ratios = u[self.n_eq + cand] / -du_in[cand]
                    k = int(np.argmin(ratios))
                    t_dual, block = ratios[k], self.n_eq + int(cand[k])
                if not np.isfinite(t_full) and block < 0:
                    return self._finish(x, W, u, QPStatus.INFEASIBLE, changes)
                if t_dual < t_full:
                    x = x + t_dual * dx if np.isfinite(t_full) else x
                    u = u + t_dual * du
                    t_p += t_dual
                    in_W[W[block] - self.n_eq] = False
                    W = W[:block] + W[block + 1:]
                    u = np.delete(u, block)
                    changes += 1
                    continue
                # add p; W stays sorted so cached maps are keyed canonically
                changes += 1
                pos = self.n_eq + int(np.searchsorted(np.asarray(W[self.n_eq:], dtype=int), row))
                W_new = W[:pos] + (row,) + W[pos:]
                sol = self._eqp(W_new, g, b)
                if sol is None:
                    # working set numerically dependent: give up with the last iterate
                    return self._finish(x + t_full * dx, W, u + t_full * du, QPStatus.MAX_ITER, changes)
                W = W_new
                in_W[p] = True
                x, u = sol
                break

    def hotstart(self, g, b_eq, b_in, warm: QPSolution) -> QPSolution:
        return self.solve(g, b_eq, b_in, warm=warm)


def solve(qp: DenseQP, warm: QPSolution | None = None, tol: float = 1e-8) -> QPSolution:
    """Solve ``qp`` from scratch or from the active set of ``warm``."""
    return QPSolver.for_qp(qp, tol=tol).solve(qp.g, qp.b_eq, qp.b_in, warm=warm)


def hotstart_update(qp: DenseQP, new_g, new_b_eq, new_b_in, warm: QPSolution,
                    solver: QPSolver | None = None) -> QPSolution:
    """Re-solve ``qp`` with new vectors, reusing ``warm`` and, if given, the factorization held by ``solver``."""
    solver = solver if solver is not None else QPSolver.for_qp(qp)
    return solver.hotstart(new_g, new_b_eq, new_b_in, warm)


def kkt_violation(qp: DenseQP, sol: QPSolution) -> float:
    """Largest violation of stationarity, feasibility, dual sign and complementarity."""
    z = sol.z
    stat = qp.H @ z + qp.g + qp.A_eq.T @ sol.lam_eq + qp.A_in.T @ sol.mu_in
    eq = qp.A_eq @ z - qp.b_eq
    slack = qp.A_in @ z - qp.b_in
    terms = [
        np.abs(stat).max(initial=0.0),
        np.abs(eq).max(initial=0.0),
        np.maximum(slack, 0.0).max(initial=0.0),
        np.maximum(-sol.mu_in, 0.0).max(initial=0.0),
        np.abs(sol.mu_in * slack).max(initial=0.0),
    ]
    return float(max(terms))
