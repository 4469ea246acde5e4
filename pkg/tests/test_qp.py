import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_nlp
from dmpc.admm import LocalQP
from dmpc.qp import DenseQP, QPSolver, QPStatus, hotstart_update, kkt_violation, solve


def enumerate_active_sets(qp: DenseQP):
    """Reference solution: try every subset of inequality rows as equalities."""
    n, m_eq, m_in = qp.n, qp.A_eq.shape[0], qp.A_in.shape[0]
    best = None
    for r in range(m_in + 1):
        for W in itertools.combinations(range(m_in), r):
            A = np.vstack([qp.A_eq, qp.A_in[list(W)]])
            b = np.concatenate([qp.b_eq, qp.b_in[list(W)]])
            K = np.block([[qp.H, A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
            try:
                sol = np.linalg.solve(K, np.concatenate([-qp.g, b]))
            except np.linalg.LinAlgError:
                continue
            z, mult = sol[:n], sol[n:]
            mu = mult[m_eq:]
            if np.all(qp.A_in @ z <= qp.b_in + 1e-9) and np.all(mu >= -1e-9):
                value = 0.5 * z @ qp.H @ z + qp.g @ z
                if best is None or value < best[0]:
                    best = (value, z, W)
    return best[1], best[2]


def random_qp(seed, n=10, m_eq=3, m_in=5):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(n, n))
    H = M @ M.T + 0.5 * np.eye(n)
    A_eq = rng.normal(size=(m_eq, n))
    A_in = rng.normal(size=(m_in, n))
    z0 = rng.normal(size=n)
    return DenseQP(H, 5 * rng.normal(size=n), A_eq, A_eq @ z0, A_in, A_in @ z0 + rng.uniform(0, 1, m_in))


def test_unconstrained_scalar():
    sol = solve(DenseQP([[1.0]], [-1.0]))
    assert sol.optimal and sol.z[0] == pytest.approx(1.0)


def test_scalar_with_bound():
    sol = solve(DenseQP([[1.0]], [-1.0], A_in=[[1.0]], b_in=[0.5]))
    assert sol.z[0] == pytest.approx(0.5)
    assert sol.mu_in[0] == pytest.approx(0.5)
    assert sol.active_set == (0,)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_active_set_enumeration(seed):
    qp = random_qp(seed)
    ref = enumerate_active_sets(qp)
    sol = solve(qp)
    assert sol.optimal
    assert np.abs(sol.z - ref[0]).max() <= 1e-7 * max(1.0, np.abs(ref[0]).max())
    assert kkt_violation(qp, sol) <= 1e-8 * max(1.0, np.abs(qp.g).max())
    assert sol.mu_in.min() >= -1e-10


def test_hotstart_with_same_data_is_a_fixed_point():
    qp = random_qp(11)
    solver = QPSolver.for_qp(qp)
    cold = solver.solve(qp.g, qp.b_eq, qp.b_in)
    hot = hotstart_update(qp, qp.g, qp.b_eq, qp.b_in, cold, solver)
    assert hot.iterations == 0
    assert np.array_equal(hot.z, cold.z)
    assert hot.active_set == cold.active_set


def test_hotstart_equality_shift_matches_cold():
    rng = np.random.default_rng(2)
    qp = random_qp(2, m_in=0)
    warm = solve(qp)
    b_new = qp.b_eq + rng.normal(size=qp.b_eq.size)
    hot = hotstart_update(qp, qp.g, b_new, qp.b_in, warm)
    cold = solve(DenseQP(qp.H, qp.g, qp.A_eq, b_new))
    assert np.abs(hot.z - cold.z).max() <= 1e-10


def test_hotstart_on_consecutive_rectangle_steps():
    nlp = make_nlp()
    sub0 = nlp.patched_subsystem(1, [-0.4, 0.0], [0.0, 0.0], np.array([[1.2, 0], [0.8, 0], [0.4, 0], [0, 0]]))
    sub1 = nlp.patched_subsystem(1, [-0.36, 0.0], [0.2, 0.0], np.array([[1.2, 0], [0.8, 0], [0.4, 0], [0, 0]]))
    local = LocalQP.for_subsystem(sub0, 1.0)
    zbar = np.zeros(sub0.n)
    first = local.solve(sub0.grad, sub0.b_eq, sub0.b_lin, np.zeros(sub0.n), zbar)
    assert first.active_set, "the step setpoint should saturate some inputs"
    hot = local.solve(sub1.grad, sub1.b_eq, sub1.b_lin, np.zeros(sub1.n), zbar, warm=first)
    cold = solve(DenseQP(sub1.H + np.eye(sub1.n), sub1.grad, sub1.A_eq, sub1.b_eq, sub1.A_lin, sub1.b_lin))
    assert hot.optimal
    assert np.abs(hot.z - cold.z).max() <= 1e-8
    assert hot.iterations <= cold.iterations


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_cold_and_hot_agree(seed, seed2):
    qp = random_qp(seed)
    other = random_qp(seed2)
    warm = solve(DenseQP(qp.H, other.g, qp.A_eq, qp.b_eq, qp.A_in, qp.b_in))
    hot = solve(qp, warm=warm)
    assert np.abs(hot.z - solve(qp).z).max() <= 1e-8 * max(1.0, np.abs(hot.z).max())


def test_infeasible_reports_status():
    qp = DenseQP(np.eye(2), np.zeros(2), A_in=[[1.0, 0.0], [-1.0, 0.0]], b_in=[-1.0, -1.0])
    assert solve(qp).status is QPStatus.INFEASIBLE
    qp = DenseQP(np.eye(2), np.zeros(2), A_eq=[[1.0, 0.0], [1.0, 0.0]], b_eq=[0.0, 1.0])
    assert solve(qp).status is QPStatus.INFEASIBLE


def test_deterministic():
    qp = random_qp(7)
    a, b = solve(qp), solve(qp)
    assert a.z.tobytes() == b.z.tobytes() and a.mu_in.tobytes() == b.mu_in.tobytes()


def test_rejects_asymmetric_hessian():
    with pytest.raises(ValueError, match="symmetric"):
        DenseQP([[1.0, 1.0], [0.0, 1.0]], [0.0, 0.0])
