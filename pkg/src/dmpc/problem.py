"""Formation OCP and its partially separable reformulation.

Each robot ``i`` owns the decision vector::

    z_i = col(x_i^0..x_i^N, u_i^0..u_i^{N-1}, w_i^0..w_i^N, s_i)

where ``w_i^k = col(w_ji^k for j in in_neighbors(i))`` are local copies of
the in-neighbors' predicted positions and ``s_i`` is an optional scalar slack
shared by all softened distance rows. Copies are tied to the originals only
through the consensus rows ``sum_i E_i z_i = 0``.

Cost split
----------
The centralized stage cost ``0.5 e'Qe`` (``e = x - xbar``) is distributed so
that every subsystem objective is convex on its own. For a coupling block
``Q_ij`` robot ``i`` carries::

    0.5 [e_i; e_wj]' [[|Q_ij|_L / 2, Q_ij / 2], [Q_ji / 2, |Q_ij|_R / 2]] [e_i; e_wj]

with ``|M|_L = (M M')^1/2`` and ``|M|_R = (M'M)^1/2``; the remainder
``Q_ii - sum_j |Q_ij|_L`` stays on ``x_i``. Summed over robots at consensus
this reproduces ``0.5 e'Qe`` exactly. The split is convex whenever ``Q`` is
block diagonally dominant in that sense, which the formation costs are.
"""

from __future__ import annotations

from functools import cached_property, lru_cache
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "ConstraintSet",
    "CouplingGraph",
    "DistanceRow",
    "Layout",
    "PairConstraint",
    "PartialNLP",
    "QuadraticNLP",
    "RobotModel",
    "StageCost",
    "Subsystem",
    "assemble_centralized_weights",
    "assemble_consensus_matrix",
    "build_coupling_graph",
    "build_partial_nlp",
    "cold_start",
    "eval_constraints",
    "leading_minors",
    "matrix_abs",
]

DEFAULT_SOFT_PENALTY = 1e4

# constraint row tags, used to shift multipliers between MPC steps
ROW_DYNAMICS, ROW_INITIAL, ROW_INPUT, ROW_STATE, ROW_SLACK, ROW_DISTANCE = range(6)


@dataclass(frozen=True)
class RobotModel:
    """Single integrator ``x+ = x + dt u`` in the plane."""

    dt: float
    state_dim: int = 2
    input_dim: int = 2

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.state_dim != self.input_dim:
            raise ValueError("single-integrator model needs state_dim == input_dim")

    def step(self, x, u):
        return np.asarray(x, dtype=float) + self.dt * np.asarray(u, dtype=float)


@dataclass
class StageCost:
    Q_ii: np.ndarray
    R_ii: np.ndarray
    P_ii: np.ndarray
    Q_ij: dict[int, np.ndarray] = field(default_factory=dict)
    P_ij: dict[int, np.ndarray] = field(default_factory=dict)
    xbar: np.ndarray | None = None
    ubar: np.ndarray | None = None

    def __post_init__(self):
        self.Q_ii = np.atleast_2d(np.asarray(self.Q_ii, dtype=float))
        self.R_ii = np.atleast_2d(np.asarray(self.R_ii, dtype=float))
        self.P_ii = np.atleast_2d(np.asarray(self.P_ii, dtype=float))
        self.Q_ij = {int(j): np.atleast_2d(np.asarray(M, dtype=float)) for j, M in self.Q_ij.items()}
        self.P_ij = {int(j): np.atleast_2d(np.asarray(M, dtype=float)) for j, M in self.P_ij.items()}
        nx, nu = self.Q_ii.shape[0], self.R_ii.shape[0]
        self.xbar = np.zeros(nx) if self.xbar is None else np.asarray(self.xbar, dtype=float)
        self.ubar = np.zeros(nu) if self.ubar is None else np.asarray(self.ubar, dtype=float)


@dataclass(frozen=True)
class PairConstraint:
    """Minimum distance ``min_distance`` to ``neighbor`` at every stage."""

    neighbor: int
    min_distance: float
    soft: bool = True


@dataclass
class ConstraintSet:
    input_lower: np.ndarray
    input_upper: np.ndarray
    state_lower: np.ndarray | None = None
    state_upper: np.ndarray | None = None
    pairs: list[PairConstraint] = field(default_factory=list)

    def __post_init__(self):
        self.input_lower = np.asarray(self.input_lower, dtype=float)
        self.input_upper = np.asarray(self.input_upper, dtype=float)
        if np.any(self.input_lower > self.input_upper):
            raise ValueError("input_lower must not exceed input_upper")
        if (self.state_lower is None) != (self.state_upper is None):
            raise ValueError("state box needs both lower and upper bounds")
        if self.state_lower is not None:
            self.state_lower = np.asarray(self.state_lower, dtype=float)
            self.state_upper = np.asarray(self.state_upper, dtype=float)
            if np.any(self.state_lower > self.state_upper):
                raise ValueError("state_lower must not exceed state_upper")

    @property
    def has_soft_rows(self) -> bool:
        return any(p.soft for p in self.pairs)


@dataclass(frozen=True)
class CouplingGraph:
    in_neighbors: dict[int, tuple[int, ...]]
    out_neighbors: dict[int, tuple[int, ...]]

    @classmethod
    def from_in_neighbors(cls, in_neighbors: Mapping[int, Sequence[int]]) -> CouplingGraph:
        ins = {i: tuple(sorted(set(js))) for i, js in in_neighbors.items()}
        outs = {i: tuple(sorted(j for j in ins if i in ins[j])) for i in ins}
        return cls(ins, outs)

    @cached_property
    def size(self) -> int:
        return len(self.in_neighbors)

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(set(self.in_neighbors[i]) | set(self.out_neighbors[i])))

    def is_consistent(self) -> bool:
        return all(
            (j in self.out_neighbors[i]) == (i in self.in_neighbors[j])
            for i in self.in_neighbors
            for j in self.in_neighbors
        )


def _nonzero(M) -> bool:
    return M is not None and bool(np.any(np.asarray(M) != 0))


def build_coupling_graph(costs: Sequence[StageCost], constraints: Sequence[ConstraintSet],
                         state_dims: Sequence[int] | None = None) -> CouplingGraph:
    """In-neighbors are the robots appearing in ``i``'s cost blocks or pair constraints."""
    S = len(costs)
    if len(constraints) != S:
        raise ValueError(f"{S} cost entries but {len(constraints)} constraint sets")
    dims = list(state_dims) if state_dims is not None else [c.Q_ii.shape[0] for c in costs]
    ins: dict[int, set[int]] = {i: set() for i in range(S)}
    for i, cost in enumerate(costs):
        if cost.Q_ii.shape != (dims[i], dims[i]) or cost.P_ii.shape != (dims[i], dims[i]):
            raise ValueError(f"robot {i}: diagonal cost blocks do not match state dimension {dims[i]}")
        for name, blocks in (("Q", cost.Q_ij), ("P", cost.P_ij)):
            for j, M in blocks.items():
                if not 0 <= j < S or j == i:
                    raise ValueError(f"robot {i}: {name}_ij refers to invalid robot {j}")
                if M.shape != (dims[i], dims[j]):
                    raise ValueError(f"robot {i}: {name}_{i}{j} has shape {M.shape}, expected {(dims[i], dims[j])}")
                if _nonzero(M):
                    ins[i].add(j)
        for pair in constraints[i].pairs:
            if not 0 <= pair.neighbor < S or pair.neighbor == i:
                raise ValueError(f"robot {i}: pair constraint refers to invalid robot {pair.neighbor}")
            ins[i].add(pair.neighbor)
    return CouplingGraph.from_in_neighbors(ins)


@dataclass(frozen=True)
class Layout:
    """Offsets of the stage blocks inside one ``z_i``."""

    N: int
    nx: int
    nu: int
    in_neighbors: tuple[int, ...] = ()
    has_slack: bool = False

    @cached_property
    def n_x(self) -> int:
        return (self.N + 1) * self.nx

    @cached_property
    def n_u(self) -> int:
        return self.N * self.nu

    @cached_property
    def n_w(self) -> int:
        return (self.N + 1) * self.nx * len(self.in_neighbors)

    @property
    def size(self) -> int:
        return self.n_x + self.n_u + self.n_w + int(self.has_slack)

    def x(self, k: int) -> slice:
        return slice(k * self.nx, (k + 1) * self.nx)

    def u(self, k: int) -> slice:
        start = self.n_x + k * self.nu
        return slice(start, start + self.nu)

    def w(self, j: int, k: int) -> slice:
        pos = self.in_neighbors.index(j)
        start = self.n_x + self.n_u + (k * len(self.in_neighbors) + pos) * self.nx
        return slice(start, start + self.nx)

    @property
    def x_block(self) -> slice:
        return slice(0, self.n_x)

    @property
    def u_block(self) -> slice:
        return slice(self.n_x, self.n_x + self.n_u)

    @property
    def w_block(self) -> slice:
        return slice(self.n_x + self.n_u, self.n_x + self.n_u + self.n_w)

    @property
    def slack(self) -> int | None:
        return self.size - 1 if self.has_slack else None

    def w_index(self, j: int) -> np.ndarray:
        """Entries of the copy trajectory of robot ``j`` in stage order (read-only)."""
        return _w_index(self, j)


@lru_cache(maxsize=1024)
def _w_index(layout: Layout, j: int) -> np.ndarray:
    idx = np.concatenate([np.arange(layout.size)[layout.w(j, k)] for k in range(layout.N + 1)])
    idx.flags.writeable = False
    return idx


@dataclass(frozen=True)
class DistanceRow:
    """``bound - ||z[x_idx] - z[w_idx]||^2 (- z[slack]) <= 0`` for one stage."""

    stage: int
    neighbor: int
    x_idx: np.ndarray
    w_idx: np.ndarray
    bound: float
    slack: int | None = None


@dataclass(kw_only=True)
class QuadraticNLP:
    """Quadratic objective, affine equalities, affine plus distance inequalities.

    ``f(z) = 0.5 z'Hz + grad'z``, ``g(z) = A_eq z - b_eq`` and ``h(z)``
    stacks the affine rows ``A_lin z - b_lin`` followed by the distance rows.
    """

    H: np.ndarray
    grad: np.ndarray
    A_eq: np.ndarray
    b_eq: np.ndarray
    A_lin: np.ndarray
    b_lin: np.ndarray
    distance_rows: tuple[DistanceRow, ...] = ()

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.A_lin.shape[0] + len(self.distance_rows)

    @property
    def is_qp(self) -> bool:
        return not self.distance_rows

    def objective(self, z) -> float:
        return float(0.5 * z @ self.H @ z + self.grad @ z)

    def gradient(self, z) -> np.ndarray:
        return self.H @ z + self.grad

    def eq(self, z) -> tuple[np.ndarray, np.ndarray]:
        return self.A_eq @ z - self.b_eq, self.A_eq

    def ineq(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=float)
        vals = [self.A_lin @ z - self.b_lin]
        jac = [self.A_lin]
        if self.distance_rows:
            m = len(self.distance_rows)
            dv = np.empty(m)
            dj = np.zeros((m, self.n))
            for r, row in enumerate(self.distance_rows):
                diff = z[row.x_idx] - z[row.w_idx]
                dv[r] = row.bound - diff @ diff
                dj[r, row.x_idx] = -2.0 * diff
                dj[r, row.w_idx] = 2.0 * diff
                if row.slack is not None:
                    dv[r] -= z[row.slack]
                    dj[r, row.slack] = -1.0
            vals.append(dv)
            jac.append(dj)
        return np.concatenate(vals), np.vstack(jac)

    def ineq_hessian(self, mu) -> np.ndarray:
        """``sum_p mu_p * hess(h_p)``; only distance rows are curved."""
        Hh = np.zeros((self.n, self.n))
        offset = self.A_lin.shape[0]
        for r, row in enumerate(self.distance_rows):
            m = mu[offset + r]
            if m == 0.0:
                continue
            xi, wi = row.x_idx, row.w_idx
            Hh[xi, xi] -= 2.0 * m
            Hh[wi, wi] -= 2.0 * m
            Hh[xi, wi] += 2.0 * m
            Hh[wi, xi] += 2.0 * m
        return Hh

    def lagrangian_hessian(self, mu) -> np.ndarray:
        return self.H + self.ineq_hessian(mu)


@dataclass(kw_only=True)
class Subsystem(QuadraticNLP):
    """Data of ``f_i``, ``g_i`` and ``h_i`` for one robot."""

    index: int
    layout: Layout
    eq_stage: np.ndarray | None = None
    ineq_stage: np.ndarray | None = None
    eq_kind: np.ndarray | None = None
    ineq_kind: np.ndarray | None = None
    zref: np.ndarray | None = None

    def with_data(self, b_eq=None, zref=None) -> Subsystem:
        new = replace(self)
        if b_eq is not None:
            new.b_eq = np.asarray(b_eq, dtype=float)
        if zref is not None:
            new.zref = np.asarray(zref, dtype=float)
            new.grad = -self.H @ new.zref
        return new


@dataclass
class PartialNLP:
    """``min sum f_i  s.t.  g_i = 0, h_i <= 0, sum_i E_i z_i = 0``."""

    subsystems: list[Subsystem]
    graph: CouplingGraph
    E_blocks: list[np.ndarray]
    N: int = 0
    models: list[RobotModel] = field(default_factory=list)
    costs: list[StageCost] = field(default_factory=list)
    constraints: list[ConstraintSet] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.subsystems)

    @property
    def E(self) -> np.ndarray:
        return np.hstack(self.E_blocks)

    @property
    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [s.n for s in self.subsystems]))

    def split(self, z) -> list[np.ndarray]:
        off = self.offsets
        return [np.asarray(z[off[i]:off[i + 1]]) for i in range(self.size)]

    def coupling_residual(self, zs) -> np.ndarray:
        return sum(E @ z for E, z in zip(self.E_blocks, zs))

    def with_data(self, x_now=None, u_now=None, xbar=None) -> PartialNLP:
        """Patch initial conditions and setpoints without rebuilding structure."""
        subs = [self.patched_subsystem(i, None if x_now is None else x_now[i],
                                       None if u_now is None else u_now[i], xbar)
                for i in range(self.size)]
        return replace(self, subsystems=subs)

    def patched_subsystem(self, i: int, x_now_i=None, u_now_i=None, xbar=None) -> Subsystem:
        """Subsystem ``i`` with a new measured state, committed input and setpoints."""
        sub = self.subsystems[i]
        lay = sub.layout
        b_eq = sub.b_eq.copy()
        dyn_rows = lay.N * lay.nx
        if x_now_i is not None:
            b_eq[dyn_rows:dyn_rows + lay.nx] = x_now_i
        if u_now_i is not None:
            b_eq[dyn_rows + lay.nx:dyn_rows + lay.nx + lay.nu] = u_now_i
        zref = None
        if xbar is not None:
            ubar = self.costs[i].ubar if self.costs else np.zeros(lay.nu)
            zref = _reference(lay, i, xbar, ubar)
        return sub.with_data(b_eq=b_eq, zref=zref)


def matrix_abs(M, side: str = "left") -> np.ndarray:
    """``(M M')^1/2`` (left) or ``(M'M)^1/2`` (right)."""
    M = np.asarray(M, dtype=float)
    G = M @ M.T if side == "left" else M.T @ M
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def assemble_centralized_weights(costs: Sequence[StageCost]):
    """Centralized ``Q = [Q_ij]``, ``R = blockdiag(R_ii)`` and ``P = [P_ij]``."""
    nxs = [c.Q_ii.shape[0] for c in costs]
    nus = [c.R_ii.shape[0] for c in costs]
    ox = np.cumsum([0] + nxs)
    ou = np.cumsum([0] + nus)
    Q = np.zeros((ox[-1], ox[-1]))
    P = np.zeros_like(Q)
    R = np.zeros((ou[-1], ou[-1]))
    for i, c in enumerate(costs):
        Q[ox[i]:ox[i + 1], ox[i]:ox[i + 1]] = c.Q_ii
        P[ox[i]:ox[i + 1], ox[i]:ox[i + 1]] = c.P_ii
        R[ou[i]:ou[i + 1], ou[i]:ou[i + 1]] = c.R_ii
        for j, M in c.Q_ij.items():
            Q[ox[i]:ox[i + 1], ox[j]:ox[j + 1]] = M
        for j, M in c.P_ij.items():
            P[ox[i]:ox[i + 1], ox[j]:ox[j + 1]] = M
    return Q, R, P


def leading_minors(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    return np.array([np.linalg.det(M[:k, :k]) for k in range(1, M.shape[0] + 1)])


def check_weights(costs: Sequence[StageCost]) -> None:
    """Raise if the assembled weights are not symmetric positive definite."""
    Q, R, P = assemble_centralized_weights(costs)
    for name, M in (("Q", Q), ("R", R), ("P", P)):
        if not np.allclose(M, M.T, atol=1e-12):
            raise ValueError(f"assembled {name} is not symmetric (check {name}_ij against {name}_ji')")
        if np.linalg.eigvalsh(M).min() <= 0.0:
            raise ValueError(f"assembled {name} is not positive definite")


def _split_blocks(costs, i, in_neighbors, which):
    """Own diagonal, copy diagonals and cross blocks of robot ``i`` for ``Q`` or ``P``."""
    c = costs[i]
    own = c.Q_ii.copy() if which == "Q" else c.P_ii.copy()
    blocks = c.Q_ij if which == "Q" else c.P_ij
    copy_diag, cross = {}, {}
    for j in in_neighbors:
        M = blocks.get(j)
        if M is None or not _nonzero(M):
            continue
        left, right = matrix_abs(M, "left"), matrix_abs(M, "right")
        own -= 0.5 * left
        copy_diag[j] = 0.5 * right
        cross[j] = 0.5 * M
    remainder = own - 0.5 * sum((matrix_abs(M, "left") for j, M in blocks.items() if _nonzero(M)),
                                np.zeros_like(own))
    if np.linalg.eigvalsh(0.5 * (remainder + remainder.T)).min() < -1e-10:
        raise ValueError(
            f"robot {i}: {which}_ii is not dominant over its coupling blocks; "
            "the per-robot cost split would not be convex"
        )
    return own, copy_diag, cross


def _reference(layout: Layout, i: int, xbar, ubar) -> np.ndarray:
    zref = np.zeros(layout.size)
    xbar = np.asarray(xbar, dtype=float)
    for k in range(layout.N + 1):
        zref[layout.x(k)] = xbar[i]
        for j in layout.in_neighbors:
            zref[layout.w(j, k)] = xbar[j]
    for k in range(layout.N):
        zref[layout.u(k)] = ubar
    return zref


def _subsystem_hessian(layout, costs, i, soft_penalty):
    n = layout.size
    H = np.zeros((n, n))
    Q_own, Q_copy, Q_cross = _split_blocks(costs, i, layout.in_neighbors, "Q")
    P_own, P_copy, P_cross = _split_blocks(costs, i, layout.in_neighbors, "P")
    for k in range(layout.N + 1):
        own, copy, cross = (Q_own, Q_copy, Q_cross) if k < layout.N else (P_own, P_copy, P_cross)
        xs = layout.x(k)
        H[xs, xs] += own
        for j in copy:
            ws = layout.w(j, k)
            H[ws, ws] += copy[j]
            H[xs, ws] += cross[j]
            H[ws, xs] += cross[j].T
    for k in range(layout.N):
        us = layout.u(k)
        H[us, us] += costs[i].R_ii
    if layout.has_slack:
        H[layout.slack, layout.slack] = 2.0 * soft_penalty
    return H


def assemble_consensus_matrix(graph: CouplingGraph, layouts: Sequence[Layout]) -> list[np.ndarray]:
    """Rows ``w_ji^k - x_j^k`` per copier ``i``, copied robot ``j``, stage ``k`` and component."""
    rows = []
    for i in range(graph.size):
        lay = layouts[i]
        if tuple(lay.in_neighbors) != tuple(graph.in_neighbors[i]):
            raise ValueError(f"layout of robot {i} does not match its in-neighbors")
        for j in lay.in_neighbors:
            for k in range(lay.N + 1):
                for c in range(layouts[j].nx):
                    rows.append((i, lay.w(j, k).start + c, j, layouts[j].x(k).start + c))
    blocks = [np.zeros((len(rows), lay.size)) for lay in layouts]
    for r, (i, col_i, j, col_j) in enumerate(rows):
        blocks[i][r, col_i] = 1.0
        blocks[j][r, col_j] = -1.0
    return blocks


def build_partial_nlp(models: Sequence[RobotModel], costs: Sequence[StageCost],
                      constraints: Sequence[ConstraintSet], graph: CouplingGraph, N: int,
                      x_now, u_now, soft_penalty: float = DEFAULT_SOFT_PENALTY,
                      literal_distance: bool = False) -> PartialNLP:
    """Reformulate the formation OCP as a partially separable NLP.

    ``literal_distance`` reads a pair constraint as ``||x_i - x_j||^2 >= d``
    instead of the default ``||x_i - x_j||^2 >= d^2``.
    """
    if N < 1:
        raise ValueError("horizon N must be at least 1")
    S = len(models)
    if not (len(costs) == len(constraints) == graph.size == S):
        raise ValueError("models, costs, constraints and graph disagree on the robot count")
    if any(cs.has_soft_rows for cs in constraints) and not soft_penalty > 0:
        raise ValueError("soft constraints need a positive slack penalty")
    check_weights(costs)
    x_now = np.asarray(x_now, dtype=float).reshape(S, -1)
    u_now = np.asarray(u_now, dtype=float).reshape(S, -1)

    layouts = []
    for i in range(S):
        for pair in constraints[i].pairs:
            if pair.neighbor not in graph.in_neighbors[i]:
                raise ValueError(f"robot {i}: pair neighbor {pair.neighbor} is not an in-neighbor in the graph")
        layouts.append(Layout(N, models[i].state_dim, models[i].input_dim,
                              tuple(graph.in_neighbors[i]), constraints[i].has_soft_rows))

    subsystems = []
    for i in range(S):
        lay, dt, cs = layouts[i], models[i].dt, constraints[i]
        n, nx, nu = lay.size, lay.nx, lay.nu
        I = np.eye(nx)

        eq_rows, eq_rhs, eq_stage = [], [], []
        for k in range(N):
            A = np.zeros((nx, n))
            A[:, lay.x(k + 1)] = I
            A[:, lay.x(k)] = -I
            A[:, lay.u(k)] = -dt * np.eye(nu)
            eq_rows.append(A)
            eq_rhs.append(np.zeros(nx))
            eq_stage += [k] * nx
        A = np.zeros((nx, n))
        A[:, lay.x(0)] = I
        eq_rows.append(A)
        eq_rhs.append(x_now[i])
        A = np.zeros((nu, n))
        A[:, lay.u(0)] = np.eye(nu)
        eq_rows.append(A)
        eq_rhs.append(u_now[i])
        eq_stage += [-1] * (nx + nu)
        eq_kind = [ROW_DYNAMICS] * (N * nx) + [ROW_INITIAL] * (nx + nu)

        lin_rows, lin_rhs, lin_stage, lin_kind = [], [], [], []
        # u^0 is pinned by an equality row, so its bounds are left out
        for k in range(1, N):
            A = np.zeros((2 * nu, n))
            A[:nu, lay.u(k)] = np.eye(nu)
            A[nu:, lay.u(k)] = -np.eye(nu)
            lin_rows.append(A)
            lin_rhs.append(np.concatenate([cs.input_upper, -cs.input_lower]))
            lin_stage += [k] * (2 * nu)
            lin_kind += [ROW_INPUT] * (2 * nu)
        if cs.state_lower is not None:
            for k in range(1, N + 1):
                A = np.zeros((2 * nx, n))
                A[:nx, lay.x(k)] = I
                A[nx:, lay.x(k)] = -I
                lin_rows.append(A)
                lin_rhs.append(np.concatenate([cs.state_upper, -cs.state_lower]))
                lin_stage += [k] * (2 * nx)
                lin_kind += [ROW_STATE] * (2 * nx)
        if lay.has_slack:
            A = np.zeros((1, n))
            A[0, lay.slack] = -1.0
            lin_rows.append(A)
            lin_rhs.append(np.zeros(1))
            lin_stage.append(-1)
            lin_kind.append(ROW_SLACK)

        dist_rows, dist_stage = [], []
        idx = np.arange(n)
        for pair in cs.pairs:
            bound = pair.min_distance if literal_distance else pair.min_distance ** 2
            for k in range(N + 1):
                dist_rows.append(DistanceRow(k, pair.neighbor, idx[lay.x(k)], idx[lay.w(pair.neighbor, k)],
                                             float(bound), lay.slack if pair.soft else None))
                dist_stage.append(k)

        H = _subsystem_hessian(lay, costs, i, soft_penalty)
        zref = _reference(lay, i, [c.xbar for c in costs], costs[i].ubar)
        subsystems.append(Subsystem(
            index=i,
            layout=lay,
            H=H,
            grad=-H @ zref,
            A_eq=np.vstack(eq_rows),
            b_eq=np.concatenate(eq_rhs),
            A_lin=np.vstack(lin_rows) if lin_rows else np.zeros((0, n)),
            b_lin=np.concatenate(lin_rhs) if lin_rhs else np.zeros(0),
            distance_rows=tuple(dist_rows),
            eq_stage=np.array(eq_stage, dtype=int),
            ineq_stage=np.array(lin_stage + dist_stage, dtype=int),
            eq_kind=np.array(eq_kind, dtype=int),
            ineq_kind=np.array(lin_kind + [ROW_DISTANCE] * len(dist_stage), dtype=int),
            zref=zref,
        ))
    return PartialNLP(subsystems, graph, assemble_consensus_matrix(graph, layouts), N,
                      list(models), list(costs), list(constraints))


def cold_start(nlp: PartialNLP, x_now, u_now=None) -> list[np.ndarray]:
    """Constant rollout at the measured states; copies sit at the neighbors' positions."""
    x_now = np.asarray(x_now, dtype=float)
    zs = []
    for i, sub in enumerate(nlp.subsystems):
        lay = sub.layout
        z = np.zeros(lay.size)
        for k in range(lay.N + 1):
            z[lay.x(k)] = x_now[i]
            for j in lay.in_neighbors:
                z[lay.w(j, k)] = x_now[j]
        if u_now is not None and lay.N > 0:
            z[lay.u(0)] = u_now[i]
        zs.append(z)
    return zs


def eval_constraints(nlp: PartialNLP, i: int, z_i):
    """``(g, dg/dz, h, dh/dz)`` of subsystem ``i`` at ``z_i``."""
    sub = nlp.subsystems[i]
    z_i = np.asarray(z_i, dtype=float)
    if z_i.shape != (sub.n,):
        raise ValueError(f"z_{i} must have length {sub.n}, got {z_i.shape}")
    g, Jg = sub.eq(z_i)
    h, Jh = sub.ineq(z_i)
    return g, Jg, h, Jh
