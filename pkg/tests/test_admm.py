import numpy as np
import pytest

from conftest import make_nlp, projector_residual, scalar_consensus_nlp
from dmpc.admm import (
    AdmmConfig,
    AdmmState,
    LocalQP,
    assemble_zbar,
    average_step,
    dual_step,
    local_min_step,
    run_admm,
)
from dmpc.bench import kkt_point, random_convex_instance
from dmpc.oracle import centralized_oracle
from dmpc.problem import Layout, cold_start
from dmpc.qp import DenseQP, solve


def _scalar_local(rho=1.0):
    return LocalQP(np.array([[1.0]]), np.zeros((0, 1)), np.zeros((0, 1)), rho)


class TestLocalStep:
    def test_proximal_pull(self):
        sol = local_min_step(0, _scalar_local(), [-1.0], [], [], [0.0], [0.0])
        assert sol.z[0] == pytest.approx(0.5)

    def test_dual_shift(self):
        sol = local_min_step(0, _scalar_local(), [0.0], [], [], [1.0], [0.0])
        assert sol.z[0] == pytest.approx(-0.5)

    def test_matches_direct_qp(self, rectangle_nlp):
        sub = rectangle_nlp.patched_subsystem(1, [-0.4, 0.0], [0.0, 0.0],
                                              np.array([[1.2, 0], [0.8, 0], [0.4, 0], [0, 0]]))
        zbar = cold_start(rectangle_nlp, np.array([[0, 0], [-0.4, 0], [-0.8, 0], [-1.2, 0]]))[1]
        sol = local_min_step(1, LocalQP.for_subsystem(sub, 1.0), sub.grad, sub.b_eq, sub.b_lin,
                             np.zeros(sub.n), zbar)
        # independent route: full KKT system of the same QP with the active set found by the solver
        ref = solve(DenseQP(sub.H + np.eye(sub.n), sub.grad - zbar, sub.A_eq, sub.b_eq, sub.A_lin, sub.b_lin))
        A = np.vstack([sub.A_eq, sub.A_lin[list(ref.active_set)]])
        b = np.concatenate([sub.b_eq, sub.b_lin[list(ref.active_set)]])
        K = np.block([[sub.H + np.eye(sub.n), A.T], [A, np.zeros((A.shape[0], A.shape[0]))]])
        z_kkt = np.linalg.solve(K, np.concatenate([zbar - sub.grad, b]))[:sub.n]
        assert np.abs(sol.z - z_kkt).max() <= 1e-9


class TestAveraging:
    def test_mean_of_two(self):
        assert average_step([1.0], [[3.0]]).tolist() == [2.0]

    def test_no_out_neighbors(self):
        assert average_step([1.0, 2.0], []).tolist() == [1.0, 2.0]

    def test_mean_of_three(self):
        assert average_step([1.0, 2.0], [[3.0, 4.0], [5.0, 0.0]]).tolist() == [3.0, 2.0]

    def test_idempotent(self):
        rng = np.random.default_rng(0)
        own, copies = rng.normal(size=4), [rng.normal(size=4) for _ in range(2)]
        avg = average_step(own, copies)
        assert np.allclose(average_step(avg, [avg, avg]), avg, rtol=0, atol=1e-15)

    def test_decoupled_zbar_is_z(self):
        lay = Layout(2, 2, 2)
        z = np.arange(lay.size, dtype=float)
        assert np.array_equal(assemble_zbar(lay, z, z[lay.x_block], {}), z)

    def test_chain_robot_copies_in_layout_order(self):
        lay = Layout(1, 2, 2, (0, 2), True)
        z = np.zeros(lay.size)
        z[lay.u_block] = [7.0, 8.0]
        z[lay.slack] = 0.3
        xb0, xb2 = np.array([1.0, 1.5, 2.0, 2.5]), np.array([3.0, 3.5, 4.0, 4.5])
        zbar = assemble_zbar(lay, z, np.full(4, 9.0), {0: xb0, 2: xb2})
        assert zbar[lay.w(0, 0)].tolist() == [1.0, 1.5] and zbar[lay.w(2, 1)].tolist() == [4.0, 4.5]
        assert zbar[lay.u_block].tolist() == [7.0, 8.0] and zbar[lay.slack] == 0.3

    def test_zbar_is_consensual(self, rectangle_nlp):
        rng = np.random.default_rng(4)
        states = [AdmmState.cold(rng.normal(size=s.n)) for s in rectangle_nlp.subsystems]
        run_admm(rectangle_nlp, states, AdmmConfig(1.0, 1))
        assert np.abs(rectangle_nlp.coupling_residual([s.zbar for s in states])).max() <= 1e-15


class TestDualStep:
    def test_formula(self):
        assert dual_step(np.zeros(1), np.array([2.0]), np.array([1.0]), 1.0).tolist() == [1.0]

    def test_consensus_keeps_gamma(self):
        g = np.array([0.3, -0.2])
        assert np.array_equal(dual_step(g, np.ones(2), np.ones(2), 5.0), g)

    def test_gamma_stays_in_row_space(self, rectangle_nlp):
        rng = np.random.default_rng(8)
        states = [AdmmState.cold(rng.normal(size=s.n)) for s in rectangle_nlp.subsystems]
        for _ in range(3):
            run_admm(rectangle_nlp, states, AdmmConfig(1.0, 4))
            gamma = np.concatenate([s.gamma for s in states])
            assert projector_residual(rectangle_nlp.E, gamma) <= 1e-10


def test_scalar_consensus_converges_to_zero():
    nlp = scalar_consensus_nlp()
    states = [AdmmState.cold(np.zeros(2)) for _ in range(2)]
    zs = run_admm(nlp, states, AdmmConfig(1.0, 50))
    # KKT of min 0.5(a-1)^2 + 0.5(a+1)^2 gives a = 0
    assert max(np.abs(z).max() for z in zs) <= 1e-6


def test_decoupled_agents_reach_standalone_optimum():
    nlp = make_nlp(S=1)
    sub = nlp.subsystems[0]
    ref = solve(DenseQP(sub.H, sub.grad, sub.A_eq, sub.b_eq, sub.A_lin, sub.b_lin))
    state = AdmmState.cold(ref.z)
    z = run_admm(nlp, [state], AdmmConfig(1.0, 1))[0]
    assert np.abs(z - ref.z).max() <= 1e-10
    assert np.array_equal(state.zbar, state.z)


def test_rectangle_matches_centralized_oracle():
    x = np.array([[0.05, 0.02], [-0.38, 0.0], [-0.85, -0.03], [-1.2, 0.04]])
    u = np.array([[0.1, 0.0], [0.05, 0.02], [0.0, 0.0], [-0.05, 0.0]])
    xbar = np.array([[1.2, 0.0], [0.8, 0.0], [0.4, 0.0], [0.0, 0.0]])
    nlp = make_nlp(x_now=x, u_now=u, xbar=xbar)
    states = [AdmmState.cold(z) for z in cold_start(nlp, x, u)]
    zs = run_admm(nlp, states, AdmmConfig(1.0, 500))
    orc = centralized_oracle(nlp.models, nlp.costs, nlp.constraints, nlp.N, x, u, xbar)
    u1 = np.array([z[s.layout.u(1)] for z, s in zip(zs, nlp.subsystems)])
    assert orc.converged
    assert np.abs(u1 - orc.u_next).max() <= 1e-6


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_optimum_is_a_fixed_point(seed):
    inst = random_convex_instance(seed)
    nlp = inst.nlp
    star = kkt_point(inst)
    states = [AdmmState(z.copy(), z.copy(), E.T @ star.lam) for z, E in zip(star.zs, nlp.E_blocks)]
    for _ in range(5):
        zs = run_admm(nlp, states, AdmmConfig(1.0, 10))
        assert max(np.abs(z - s).max() for z, s in zip(zs, star.zs)) <= 1e-8


def test_config_validation():
    with pytest.raises(ValueError):
        AdmmConfig(rho=0.0)
    with pytest.raises(ValueError):
        AdmmConfig(l_max=0)
