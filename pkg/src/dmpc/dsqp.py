"""Decentralized SQP: outer linearization, inner consensus ADMM on the step.

Each outer iteration ``q`` linearizes the constraints of every subsystem at
``z^q`` and builds the local QP in the step ``dz``. The coupled QP is solved
inexactly by ADMM whose averaging acts on ``z^q + dz``; the averaged point
becomes ``z^{q+1}`` (a full step) and the multipliers of the last local QP
replace ``nu`` and ``mu``. The consensus dual ``gamma`` is carried across
outer iterations.

Stopping of the inner loop is either a fixed iteration budget or the
inexact-Newton test ``||F + dF d|| <= eta ||F||`` on the KKT residual ``F``
(stationarity and equalities per subsystem, then the coupling rows).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import block_diag

from .admm import LocalQP, SubsystemQPError, consensus_rounds
from .agents import (
    COPIES,
    PRE_ROUND,
    REDUCE,
    AgentContext,
    Await,
    MessageKey,
    Publish,
    lockstep_contexts,
    run_lockstep,
)
from .admm import copy_of
from .oracle import regularize_hessian, stack_partial_nlp
from .problem import PartialNLP, Subsystem
from .qp import DenseQP, QPSolution, QPSolver, QPStatus

__all__ = [
    "DsqpConfig",
    "error_ratios",
    "superlinear_signature",
    "SqpIterate",
    "build_subsystem_qp",
    "dsqp_agent",
    "dynamic_stop",
    "eta_schedule",
    "exact_qp_step",
    "hessian_gauss_newton",
    "hessian_regularized_exact",
    "kkt_residual",
    "lambda_from_gamma",
    "newton_step",
    "run_dsqp",
    "run_dsqp_exact",
    "strict_complementarity",
    "licq_holds",
]

HESSIANS = ("gauss_newton", "regularized_exact")
STOPPING = ("fixed", "dynamic")


@dataclass(frozen=True)
class DsqpConfig:
    q_max: int = 5
    l_max: int = 3
    rho: float = 1.0
    hessian: str = "gauss_newton"
    eps_reg: float = 1e-4
    stopping: str = "fixed"

    def __post_init__(self):
        if self.q_max < 1 or self.l_max < 1:
            raise ValueError("q_max and l_max must be at least 1")
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not self.eps_reg > 0:
            raise ValueError("eps_reg must be positive")
        if self.hessian not in HESSIANS:
            raise ValueError(f"hessian must be one of {HESSIANS}, got {self.hessian!r}")
        if self.stopping not in STOPPING:
            raise ValueError(f"stopping must be one of {STOPPING}, got {self.stopping!r}")


@dataclass
class SqpIterate:
    z: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    dz: np.ndarray | None = None
    dnu: np.ndarray | None = None
    dmu: np.ndarray | None = None
    qp: QPSolution | None = None
    local: LocalQP | None = field(default=None, repr=False)
    inner_iterations: list[int] = field(default_factory=list)

    @classmethod
    def cold(cls, sub: Subsystem, z) -> SqpIterate:
        z = np.asarray(z, dtype=float).copy()
        return cls(z, np.zeros(sub.n_eq), np.zeros(sub.n_ineq), np.zeros_like(z))


def hessian_gauss_newton(sub: Subsystem) -> np.ndarray:
    return sub.H


def hessian_regularized_exact(sub: Subsystem, mu, eps: float = 1e-4) -> np.ndarray:
    return regularize_hessian(sub.lagrangian_hessian(mu), eps)


def subsystem_hessian(sub: Subsystem, mu, config: DsqpConfig) -> np.ndarray:
    if config.hessian == "gauss_newton":
        return hessian_gauss_newton(sub)
    return hessian_regularized_exact(sub, mu, config.eps_reg)


def build_subsystem_qp(sub: Subsystem, z, hessian) -> DenseQP:
    """QP in ``dz``: objective ``0.5 dz'H dz + grad f(z)'dz`` with linearized constraints."""
    g, Jg = sub.eq(z)
    h, Jh = sub.ineq(z)
    return DenseQP(hessian, sub.gradient(z), Jg, -g, Jh, -h)


def lambda_from_gamma(E, gamma) -> np.ndarray:
    """Least-squares coupling multiplier ``(EE')^-1 E gamma``."""
    E = np.asarray(E, dtype=float)
    if E.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.solve(E @ E.T, E @ np.asarray(gamma, dtype=float))


def _local_blocks(sub: Subsystem, z, nu, mu, Et_lam):
    g, Jg = sub.eq(z)
    h, Jh = sub.ineq(z)
    stat = sub.gradient(z) + Jg.T @ nu + Jh.T @ mu + Et_lam
    return stat, g, Jg, Jh


def kkt_residual(nlp: PartialNLP, zs, nus, mus, lam):
    """``F`` and ``dF`` of the stopping test, assembled centrally.

    ``F = (grad L_1, g_1, ..., grad L_S, g_S, sum E_i z_i)``; the columns of
    ``dF`` are ordered ``(z_1, nu_1, mu_1, ..., z_S, nu_S, mu_S, lam)``.
    """
    lam = np.asarray(lam, dtype=float)
    m = nlp.E_blocks[0].shape[0] if nlp.E_blocks else 0
    F_parts, row_blocks, col_sizes = [], [], []
    for i, sub in enumerate(nlp.subsystems):
        Ei = nlp.E_blocks[i]
        stat, g, Jg, Jh = _local_blocks(sub, zs[i], nus[i], mus[i], Ei.T @ lam)
        F_parts += [stat, g]
        W = sub.lagrangian_hessian(mus[i])
        top = np.hstack([W, Jg.T, Jh.T])
        bottom = np.hstack([Jg, np.zeros((sub.n_eq, sub.n_eq + sub.n_ineq))])
        row_blocks.append(np.vstack([top, bottom]))
        col_sizes.append(sub.n + sub.n_eq + sub.n_ineq)
    F_parts.append(nlp.coupling_residual(zs) if m else np.zeros(0))
    F = np.concatenate(F_parts)
    JF = np.zeros((F.size, sum(col_sizes) + m))
    r = c = 0
    for i, (blk, sub) in enumerate(zip(row_blocks, nlp.subsystems)):
        JF[r:r + blk.shape[0], c:c + blk.shape[1]] = blk
        Ei = nlp.E_blocks[i]
        JF[r:r + sub.n, sum(col_sizes):] = Ei.T
        JF[F.size - m:, c:c + sub.n] = Ei
        r += blk.shape[0]
        c += blk.shape[1]
    return F, JF


def stack_direction(nlp: PartialNLP, dzs, dnus, dmus, dlam) -> np.ndarray:
    parts = []
    for i in range(nlp.size):
        parts += [dzs[i], dnus[i], dmus[i]]
    parts.append(np.asarray(dlam, dtype=float))
    return np.concatenate(parts)


def eta_schedule(F_norm: float) -> float:
    return min(0.5, F_norm)


def dynamic_stop(F, JF, d, eta: float) -> bool:
    F = np.asarray(F, dtype=float)
    return bool(np.abs(F + JF @ d).max(initial=0.0) <= eta * np.abs(F).max(initial=0.0))


def newton_step(nlp: PartialNLP, zs, nus, mus, lam):
    """Newton direction on ``F`` with the inequality multipliers held fixed.

    Solves the square system formed by the ``z``, ``nu`` and ``lam`` columns
    of ``dF``; returns the full direction with ``dmu = 0``.
    """
    F, JF = kkt_residual(nlp, zs, nus, mus, lam)
    keep = np.ones(JF.shape[1], dtype=bool)
    c = 0
    for sub in nlp.subsystems:
        c += sub.n + sub.n_eq
        keep[c:c + sub.n_ineq] = False
        c += sub.n_ineq
    d = np.zeros(JF.shape[1])
    d[keep] = np.linalg.solve(JF[:, keep], -F)
    return d, F, JF


def strict_complementarity(nlp: PartialNLP, zs, mus, tol: float = 1e-8) -> bool:
    """``h_p + mu_p != 0`` for every inequality row of every subsystem."""
    for sub, z, mu in zip(nlp.subsystems, zs, mus):
        h, _ = sub.ineq(z)
        if np.any(np.abs(h + mu) <= tol):
            return False
    return True


def licq_holds(nlp: PartialNLP, zs, tol: float = 1e-8) -> bool:
    """Full row rank of equality, active inequality and coupling gradients."""
    blocks_eq, blocks_act = [], []
    for sub, z in zip(nlp.subsystems, zs):
        _, Jg = sub.eq(z)
        h, Jh = sub.ineq(z)
        blocks_eq.append(Jg)
        blocks_act.append(Jh[np.abs(h) <= tol])
    n = sum(s.n for s in nlp.subsystems)
    M = np.vstack([block_diag(*blocks_eq).reshape(-1, n), block_diag(*blocks_act).reshape(-1, n), nlp.E])
    if M.shape[0] == 0:
        return True
    sv = np.linalg.svd(M, compute_uv=False)
    return bool(M.shape[0] <= n and sv[-1] > tol * max(1.0, sv[0]))


DSQP_LABELS = {
    "qp": "step6_qp",
    "copies": "step7_8_comm_z",
    "averages": "step9_comm_zbar",
}


def _local_qp_for(it: SqpIterate, H, Jg, Jh, rho) -> LocalQP:
    if it.local is None or not it.local.matches(H, Jg, Jh, rho):
        it.local = LocalQP(H, Jg, Jh, rho)
    return it.local


def dsqp_agent(ctx: AgentContext, i: int, nlp: PartialNLP, it: SqpIterate, config: DsqpConfig,
               sub: Subsystem | None = None, step: int = 0):
    """Generator running the dSQP iterations of agent ``i``; updates ``it`` in place."""
    sub = nlp.subsystems[i] if sub is None else sub
    layouts = [s.layout for s in nlp.subsystems]
    lay = layouts[i]
    graph = nlp.graph
    everyone = tuple(range(nlp.size))
    t_solve = ctx.now()
    it.inner_iterations = []
    for q in range(config.q_max):
        t_q = ctx.now()
        z = it.z
        g, Jg = sub.eq(z)
        h, Jh = sub.ineq(z)
        grad = sub.gradient(z)
        Hq = subsystem_hessian(sub, it.mu, config)
        local = _local_qp_for(it, Hq, Jg, Jh, config.rho)
        ctx.record("step3_build_qp", t_q)

        after_round = None
        if config.stopping == "dynamic":
            yield Publish(MessageKey(i, step, q, PRE_ROUND, COPIES), z[lay.w_block])
            got = yield Await(tuple(MessageKey(j, step, q, PRE_ROUND, COPIES) for j in graph.out_neighbors[i]))
            x_own = z[lay.x_block]
            stat = grad + Jg.T @ it.nu + Jh.T @ it.mu + it.gamma
            coupling = [copy_of(i, layouts[j], got[MessageKey(j, step, q, PRE_ROUND, COPIES)]) - x_own
                        for j in graph.out_neighbors[i]]
            F_norm_i = max(np.abs(np.concatenate([stat, g] + coupling)).max(initial=0.0), 0.0)
            W = sub.lagrangian_hessian(it.mu)
            nu0, mu0 = it.nu, it.mu

            def after_round(l, res, q=q, F_norm_i=F_norm_i, W=W, nu0=nu0, mu0=mu0, z=z, g=g, Jg=Jg, Jh=Jh,
                            grad=grad):
                dz = res.z
                lin_stat = grad + W @ dz + Jg.T @ res.qp.lam_eq + Jh.T @ res.qp.mu_in + res.gamma
                lin_eq = g + Jg @ dz
                x_new = z[lay.x_block] + dz[lay.x_block]
                lin_cpl = [res.own_copies[j] - x_new for j in graph.out_neighbors[i]]
                lin_norm_i = np.abs(np.concatenate([lin_stat, lin_eq] + lin_cpl)).max(initial=0.0)
                yield Publish(MessageKey(i, step, q, l, REDUCE), np.array([F_norm_i, lin_norm_i]))
                got = yield Await(tuple(MessageKey(j, step, q, l, REDUCE) for j in everyone))
                vals = np.array([got[MessageKey(j, step, q, l, REDUCE)] for j in everyone])
                F_norm, lin_norm = vals[:, 0].max(), vals[:, 1].max()
                return bool(lin_norm <= eta_schedule(F_norm) * F_norm)

        def solve_local(gamma, dzbar, warm, local=local, grad=grad, g=g, h=h):
            sol = local.solve(grad, -g, -h, gamma, dzbar, warm if warm is not None else it.qp)
            if not sol.optimal:
                raise SubsystemQPError(i, sol.status)
            return sol

        t_inner = ctx.now()
        res = yield from consensus_rounds(ctx, i, layouts, graph, solve_local, it.gamma, np.zeros(sub.n),
                                          config.rho, config.l_max, step, outer=q, offset=z,
                                          labels=DSQP_LABELS, after_round=after_round)
        ctx.record("admm_per_dsqp_iter", t_inner)
        it.dz = res.zbar
        it.dnu = res.qp.lam_eq - it.nu
        it.dmu = res.qp.mu_in - it.mu
        it.z = res.zbar_abs
        it.nu, it.mu, it.gamma, it.qp = res.qp.lam_eq, res.qp.mu_in, res.gamma, res.qp
        it.inner_iterations.append(res.iterations)
        ctx.record("dsqp_iteration", t_q)
    ctx.record("dsqp_solve", t_solve)
    return it.z


def run_dsqp(nlp: PartialNLP, iterates: Sequence[SqpIterate], config: DsqpConfig,
             driver: Callable | None = None, step: int = 0) -> list[np.ndarray]:
    contexts = lockstep_contexts(range(nlp.size))
    gens = {i: dsqp_agent(contexts[i], i, nlp, iterates[i], config, step=step) for i in range(nlp.size)}
    results = (driver or run_lockstep)(gens, contexts)
    for i in range(nlp.size):
        if isinstance(results.get(i), BaseException):
            raise results[i]
    return [results[i] for i in range(nlp.size)]


def exact_qp_step(nlp: PartialNLP, iterates: Sequence[SqpIterate], config: DsqpConfig):
    """Solve the coupled QP of one outer iteration centrally.

    Returns ``(dz, nu_qp, mu_qp, lam_qp)`` per subsystem plus the coupling
    multiplier; used when the inner problem is to be solved exactly.
    """
    stacked = stack_partial_nlp(nlp)
    zs = [it.z for it in iterates]
    z = np.concatenate(zs)
    Hs = [subsystem_hessian(sub, it.mu, config) for sub, it in zip(nlp.subsystems, iterates)]
    H = block_diag(*Hs) + stacked.augmentation
    g, Jg = stacked.eq(z)
    h, Jh = stacked.ineq(z)
    sol = QPSolver(H, Jg, Jh).solve(stacked.gradient(z), -g, -h)
    if sol.status is not QPStatus.OPTIMAL:
        raise RuntimeError(f"coupled QP returned {sol.status.value}")
    off = nlp.offsets
    n_eq = np.cumsum([0] + [s.n_eq for s in nlp.subsystems])
    n_in = np.cumsum([0] + [s.n_ineq for s in nlp.subsystems])
    dz = [sol.z[off[i]:off[i + 1]] for i in range(nlp.size)]
    nus = [sol.lam_eq[n_eq[i]:n_eq[i + 1]] for i in range(nlp.size)]
    mus = [sol.mu_in[n_in[i]:n_in[i + 1]] for i in range(nlp.size)]
    lam = sol.lam_eq[n_eq[-1]:]
    return dz, nus, mus, lam


def run_dsqp_exact(nlp: PartialNLP, iterates: Sequence[SqpIterate], config: DsqpConfig,
                   lam=None) -> list[tuple]:
    """Outer iterations with exactly solved coupled QPs; returns ``(z, nu, mu, lam)`` per iterate."""
    lam = np.zeros(nlp.E.shape[0]) if lam is None else np.asarray(lam, dtype=float)
    history = [([it.z.copy() for it in iterates], [it.nu.copy() for it in iterates],
                [it.mu.copy() for it in iterates], lam.copy())]
    for _ in range(config.q_max):
        dz, nus, mus, lam = exact_qp_step(nlp, iterates, config)
        for i, it in enumerate(iterates):
            it.dz, it.dnu, it.dmu = dz[i], nus[i] - it.nu, mus[i] - it.mu
            it.z = it.z + dz[i]
            it.nu, it.mu = nus[i], mus[i]
            it.gamma = nlp.E_blocks[i].T @ lam
        history.append(([it.z.copy() for it in iterates], [it.nu.copy() for it in iterates],
                        [it.mu.copy() for it in iterates], lam.copy()))
    return history


def error_ratios(errors) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return e[1:] / e[:-1]


def superlinear_signature(errors, window: int = 4, floor: float = 1e-12) -> bool:
    """True if ``window`` consecutive outer error ratios are strictly decreasing.

    A ratio whose new error is already below ``floor`` counts as decreasing:
    the iteration has reached working precision and roundoff makes further
    ratios meaningless. ``floor=0`` gives the raw strict test.
    """
    e = np.asarray(errors, dtype=float)
    ratios = error_ratios(e)
    run = 0
    for q in range(1, ratios.size):
        if e[q + 1] <= floor or ratios[q] < ratios[q - 1]:
            run += 1
            if run >= window - 1:
                return True
        else:
            run = 0
    return False
