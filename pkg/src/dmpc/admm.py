"""Decentralized consensus ADMM over the copy reformulation.

Every round of an agent ``i`` consists of

1. a local QP with Hessian ``H_i + rho I`` and gradient ``g_i + gamma_i - rho zbar_i``,
2. sending its copies to the owners and averaging the copies it receives of itself,
3. sending the average back and assembling ``zbar_i`` from its own and its
   in-neighbors' averages,
4. the dual ascent ``gamma_i += rho (z_i - zbar_i)``.

Inputs and the slack are local, so ``zbar_i`` simply repeats them.
"""

from __future__ import annotations

from functools import partial
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .agents import (
    AVERAGES,
    COPIES,
    AgentContext,
    Await,
    MessageKey,
    Publish,
    lockstep_contexts,
    run_lockstep,
)
from .problem import CouplingGraph, Layout, PartialNLP, Subsystem
from .qp import QPSolution, QPSolver, QPStatus

__all__ = [
    "AdmmConfig",
    "AdmmState",
    "LocalQP",
    "SubsystemQPError",
    "admm_agent",
    "assemble_zbar",
    "average_step",
    "consensus_rounds",
    "copy_of",
    "dual_step",
    "local_min_step",
    "run_admm",
]


class SubsystemQPError(RuntimeError):
    def __init__(self, index: int, status: QPStatus):
        super().__init__(f"subsystem {index}: local QP returned {status.value}")
        self.index = index
        self.status = status


@dataclass(frozen=True)
class AdmmConfig:
    rho: float = 1.0
    l_max: int = 5

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.l_max < 1:
            raise ValueError(f"l_max must be at least 1, got {self.l_max}")


@dataclass
class AdmmState:
    z: np.ndarray
    zbar: np.ndarray
    gamma: np.ndarray
    l: int = 0
    qp: QPSolution | None = None

    @classmethod
    def cold(cls, zbar) -> AdmmState:
        zbar = np.asarray(zbar, dtype=float).copy()
        return cls(zbar.copy(), zbar, np.zeros_like(zbar))


@dataclass
class LocalQP:
    """Local augmented-Lagrangian QP of one subsystem with a reusable factorization."""

    H: np.ndarray
    A_eq: np.ndarray
    A_in: np.ndarray
    rho: float
    solver: QPSolver = field(init=False)

    def __post_init__(self):
        self.solver = QPSolver(self.H + self.rho * np.eye(self.H.shape[0]), self.A_eq, self.A_in)

    @classmethod
    def for_subsystem(cls, sub: Subsystem, rho: float) -> LocalQP:
        return cls(sub.H, sub.A_eq, sub.A_lin, rho)

    def matches(self, H, A_eq, A_in, rho) -> bool:
        return (rho == self.rho and H.shape == self.H.shape and A_in.shape == self.A_in.shape
                and np.array_equal(H, self.H) and np.array_equal(A_eq, self.A_eq)
                and np.array_equal(A_in, self.A_in))

    def solve(self, grad, b_eq, b_in, gamma, zbar, warm: QPSolution | None = None) -> QPSolution:
        g = np.asarray(grad, dtype=float) + gamma - self.rho * np.asarray(zbar, dtype=float)
        return self.solver.solve(g, b_eq, b_in, warm=warm)


def local_min_step(index: int, local: LocalQP, grad, b_eq, b_in, gamma, zbar,
                   warm: QPSolution | None = None) -> QPSolution:
    """``argmin f_i(z) + gamma'(z - zbar) + rho/2 ||z - zbar||^2`` over the local constraints."""
    sol = local.solve(grad, b_eq, b_in, gamma, zbar, warm)
    if not sol.optimal:
        raise SubsystemQPError(index, sol.status)
    return sol


def average_step(own, copies: Sequence[np.ndarray]) -> np.ndarray:
    total = np.array(own, dtype=float, copy=True)
    for c in copies:
        total += c
    return total / (len(copies) + 1)


def assemble_zbar(layout: Layout, z, own_average, neighbor_averages: Mapping[int, np.ndarray]) -> np.ndarray:
    """Own averaged states, unchanged inputs and slack, copies replaced by neighbor averages."""
    zbar = np.array(z, dtype=float, copy=True)
    zbar[layout.x_block] = own_average
    for j in layout.in_neighbors:
        zbar[layout.w_index(j)] = neighbor_averages[j]
    return zbar


def dual_step(gamma, z, zbar, rho: float) -> np.ndarray:
    return gamma + rho * (z - zbar)


def copy_of(owner: int, copier_layout: Layout, copier_w) -> np.ndarray:
    """Trajectory of ``owner`` inside the published copy block of another agent."""
    idx = copier_layout.w_index(owner) - copier_layout.w_block.start
    return copier_w[idx]


@dataclass
class RoundResult:
    z: np.ndarray
    zbar: np.ndarray
    gamma: np.ndarray
    qp: QPSolution
    iterations: int
    zbar_abs: np.ndarray | None = None
    own_copies: dict[int, np.ndarray] | None = None


def consensus_rounds(ctx: AgentContext, i: int, layouts: Sequence[Layout], graph: CouplingGraph,
                     solve_local: Callable[[np.ndarray, np.ndarray, QPSolution | None], QPSolution],
                     gamma, zbar, rho: float, l_max: int, step: int, outer: int = 0,
                     offset=None, labels: Mapping[str, str] | None = None,
                     after_round: Callable | None = None):
    """Generator running up to ``l_max`` ADMM rounds for agent ``i``.

    ``solve_local(gamma, zbar, warm)`` returns the local QP solution. When
    ``offset`` is given the variables are steps around ``offset`` and the
    averaging acts on ``offset + z``, so consensus is reached by the absolute
    iterate. ``after_round(l, result)`` may return True to stop early; it may
    itself be a generator (for example, a reduction over the transport).
    """
    labels = labels or {}
    lay = layouts[i]
    out_nb = graph.out_neighbors[i]
    in_nb = graph.in_neighbors[i]
    base = np.zeros(lay.size) if offset is None else np.asarray(offset, dtype=float)
    gamma = np.array(gamma, dtype=float, copy=True)
    zbar = np.array(zbar, dtype=float, copy=True)
    sol = None
    result = None
    for l in range(l_max):
        t0 = ctx.now()
        sol = solve_local(gamma, zbar, sol)
        t1 = ctx.record(labels.get("qp", "qp"), t0)
        z = sol.z
        absolute = base + z
        yield Publish(MessageKey(i, step, outer, l, COPIES), absolute[lay.w_block])
        got = yield Await(tuple(MessageKey(j, step, outer, l, COPIES) for j in out_nb))
        own_copies = {j: copy_of(i, layouts[j], got[MessageKey(j, step, outer, l, COPIES)]) for j in out_nb}
        avg = average_step(absolute[lay.x_block], [own_copies[j] for j in out_nb])
        t2 = ctx.record(labels.get("copies", "comm_z"), t1)
        yield Publish(MessageKey(i, step, outer, l, AVERAGES), avg)
        got = yield Await(tuple(MessageKey(j, step, outer, l, AVERAGES) for j in in_nb))
        ctx.record(labels.get("averages", "comm_zbar"), t2)
        zbar_abs = assemble_zbar(lay, absolute, avg, {j: got[MessageKey(j, step, outer, l, AVERAGES)] for j in in_nb})
        zbar = zbar_abs - base if offset is not None else zbar_abs
        gamma = dual_step(gamma, z, zbar, rho)
        if "iteration" in labels:
            ctx.record(labels["iteration"], t0)
        result = RoundResult(z, zbar, gamma, sol, l + 1, zbar_abs, own_copies)
        if after_round is not None:
            stop = after_round(l, result)
            if hasattr(stop, "send"):
                stop = yield from stop
            if stop:
                break
    return result


ADMM_LABELS = {
    "qp": "step3_qp",
    "copies": "step4_5_comm_z",
    "averages": "step6_comm_zbar",
    "iteration": "admm_iteration",
}


def admm_agent(ctx: AgentContext, i: int, nlp: PartialNLP, state: AdmmState, config: AdmmConfig,
               local: LocalQP | None = None, sub: Subsystem | None = None, step: int = 0,
               after_round: Callable | None = None):
    """Generator running consensus ADMM for agent ``i``; updates ``state`` in place and returns ``z_i``."""
    sub = nlp.subsystems[i] if sub is None else sub
    local = LocalQP.for_subsystem(sub, config.rho) if local is None else local
    layouts = [s.layout for s in nlp.subsystems]
    t0 = ctx.now()

    def solve_local(gamma, zbar, warm):
        return local_min_step(i, local, sub.grad, sub.b_eq, sub.b_lin, gamma, zbar,
                              warm if warm is not None else state.qp)

    res = yield from consensus_rounds(ctx, i, layouts, nlp.graph, solve_local, state.gamma, state.zbar,
                                      config.rho, config.l_max, step, labels=ADMM_LABELS,
                                      after_round=after_round)
    ctx.record("admm_solve", t0)
    state.z, state.zbar, state.gamma, state.qp = res.z, res.zbar, res.gamma, res.qp
    state.l += res.iterations
    return state.z


def run_admm(nlp: PartialNLP, states: Sequence[AdmmState], config: AdmmConfig,
             driver: Callable | None = None, locals_: Sequence[LocalQP] | None = None,
             step: int = 0, after_round: Callable | None = None) -> list[np.ndarray]:
    """Run ``l_max`` synchronous rounds for all subsystems and return every ``z_i``.

    ``driver(gens, contexts)`` defaults to the deterministic lockstep driver.
    ``after_round(i, l, result)`` observes every agent's round.
    """
    contexts = lockstep_contexts(range(nlp.size))
    gens = {
        i: admm_agent(contexts[i], i, nlp, states[i], config,
                      None if locals_ is None else locals_[i], step=step,
                      after_round=None if after_round is None else partial(after_round, i))
        for i in range(nlp.size)
    }
    results = (driver or run_lockstep)(gens, contexts)
    for i in range(nlp.size):
        if isinstance(results.get(i), BaseException):
            raise results[i]
    return [results[i] for i in range(nlp.size)]
