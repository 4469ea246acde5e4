from __future__ import annotations

import numpy as np
import pytest

from dmpc.problem import (
    ConstraintSet,
    CouplingGraph,
    Layout,
    PairConstraint,
    PartialNLP,
    RobotModel,
    StageCost,
    Subsystem,
    assemble_consensus_matrix,
    build_coupling_graph,
    build_partial_nlp,
)
from dmpc.scenario import load_scenario

I2 = np.eye(2)


def chain_costs(S: int = 4, diag=(20.0, 20.0, 20.0, 10.0), coupling: float = -10.0):
    costs = []
    for i in range(S):
        Qij = {j: coupling * I2 for j in (i - 1, i + 1) if 0 <= j < S}
        costs.append(StageCost(diag[i] * I2, I2, diag[i] * I2, Qij, dict(Qij)))
    return costs


def make_nlp(S=4, N=7, bound=0.2, pairs=None, x_now=None, u_now=None, xbar=None, soft=True):
    """Chain formation problem; ``pairs`` maps robot -> neighbor with a 0.4 m distance row."""
    costs = chain_costs(S)
    if xbar is not None:
        for c, xb in zip(costs, xbar):
            c.xbar = np.asarray(xb, dtype=float)
    pairs = pairs or {}
    constraints = [
        ConstraintSet(-bound * np.ones(2), bound * np.ones(2),
                      pairs=[PairConstraint(pairs[i], 0.4, soft)] if i in pairs else [])
        for i in range(S)
    ]
    graph = build_coupling_graph(costs, constraints)
    x_now = np.array([[-0.4 * i, 0.0] for i in range(S)]) if x_now is None else np.asarray(x_now, dtype=float)
    u_now = np.zeros((S, 2)) if u_now is None else np.asarray(u_now, dtype=float)
    return build_partial_nlp([RobotModel(0.2)] * S, costs, constraints, graph, N, x_now, u_now)


def scalar_consensus_nlp(targets=(1.0, -1.0)) -> PartialNLP:
    """Two scalar agents that each hold a copy of the other's value.

    Agent ``i`` minimizes ``0.5 (x_i - target_i)^2`` subject to the local
    equality ``x_i = copy``; consensus on the copies then forces ``x_1 = x_2``.
    """
    graph = CouplingGraph.from_in_neighbors({0: [1], 1: [0]})
    layouts = [Layout(0, 1, 0, (1,)), Layout(0, 1, 0, (0,))]
    subs = []
    for i, (lay, t) in enumerate(zip(layouts, targets)):
        H = np.diag([1.0, 0.0])
        subs.append(Subsystem(index=i, layout=lay, H=H, grad=np.array([-t, 0.0]),
                              A_eq=np.array([[1.0, -1.0]]), b_eq=np.zeros(1),
                              A_lin=np.zeros((0, 2)), b_lin=np.zeros(0),
                              eq_stage=np.full(1, -1), ineq_stage=np.zeros(0, int),
                              eq_kind=np.zeros(1, int), ineq_kind=np.zeros(0, int)))
    return PartialNLP(subs, graph, assemble_consensus_matrix(graph, layouts), 0)


def projector_residual(E, gamma) -> float:
    """``||(I - E'(EE')^-1 E) gamma||_inf``: distance of ``gamma`` from the row space of ``E``."""
    P = E.T @ np.linalg.solve(E @ E.T, E)
    return float(np.abs(gamma - P @ gamma).max())


def central_fd_jacobian(fun, z, step=1e-6):
    z = np.asarray(z, dtype=float)
    cols = []
    for k in range(z.size):
        e = np.zeros_like(z)
        e[k] = step
        cols.append((fun(z + e) - fun(z - e)) / (2 * step))
    return np.column_stack(cols)


@pytest.fixture(scope="session")
def rectangle():
    return load_scenario("rectangle")


@pytest.fixture(scope="session")
def rectangle_nlp():
    return make_nlp()
