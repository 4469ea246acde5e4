import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import I2, central_fd_jacobian, chain_costs, make_nlp
from dmpc.oracle import centralized_ocp
from dmpc.problem import (
    ConstraintSet,
    CouplingGraph,
    Layout,
    PairConstraint,
    RobotModel,
    StageCost,
    assemble_centralized_weights,
    assemble_consensus_matrix,
    build_coupling_graph,
    build_partial_nlp,
    check_weights,
    cold_start,
    eval_constraints,
    leading_minors,
)


def _box(n=4, pairs=None):
    pairs = pairs or {}
    return [ConstraintSet(-0.2 * np.ones(2), 0.2 * np.ones(2), pairs=pairs.get(i, [])) for i in range(n)]


class TestCouplingGraph:
    def test_chain(self):
        g = build_coupling_graph(chain_costs(), _box())
        assert g.in_neighbors == {0: (1,), 1: (0, 2), 2: (1, 3), 3: (2,)}
        assert g.out_neighbors == g.in_neighbors
        assert g.is_consistent()

    def test_decoupled(self):
        costs = [StageCost(I2, I2, I2) for _ in range(3)]
        g = build_coupling_graph(costs, _box(3))
        assert all(not g.in_neighbors[i] and not g.out_neighbors[i] for i in range(3))

    def test_distance_constraint_only(self):
        costs = [StageCost(I2, I2, I2) for _ in range(2)]
        g = build_coupling_graph(costs, _box(2, {1: [PairConstraint(0, 0.4)]}))
        assert g.in_neighbors == {0: (), 1: (0,)}
        assert g.out_neighbors == {0: (1,), 1: ()}
        assert g.neighbors(0) == (1,)

    def test_bad_block_shape(self):
        costs = [StageCost(I2, I2, I2, {1: np.eye(3)}), StageCost(I2, I2, I2)]
        with pytest.raises(ValueError, match="shape"):
            build_coupling_graph(costs, _box(2))


class TestLayout:
    def test_rectangle_dimension(self, rectangle_nlp):
        assert rectangle_nlp.subsystems[0].n == 8 * 2 + 7 * 2 + 8 * 2 == 46
        assert rectangle_nlp.subsystems[1].n == 8 * 2 + 7 * 2 + 2 * 8 * 2

    def test_blocks_partition_z(self):
        lay = Layout(3, 2, 2, (0, 2), True)
        idx = np.zeros(lay.size, int)
        for k in range(4):
            idx[lay.x(k)] += 1
            for j in (0, 2):
                idx[lay.w(j, k)] += 1
        for k in range(3):
            idx[lay.u(k)] += 1
        idx[lay.slack] += 1
        assert np.all(idx == 1)
        assert lay.size == 8 + 6 + 16 + 1

    def test_w_index_read_only(self):
        lay = Layout(2, 2, 2, (1,))
        with pytest.raises(ValueError):
            lay.w_index(1)[0] = 5


class TestConsensusMatrix:
    def test_rectangle_row_count_and_pattern(self, rectangle_nlp):
        E = rectangle_nlp.E
        assert E.shape[0] == (1 + 2 + 2 + 1) * 2 * 8 == 96
        assert np.all((E == 1).sum(axis=1) == 1)
        assert np.all((E == -1).sum(axis=1) == 1)
        assert np.all((E != 0).sum(axis=1) == 2)
        assert np.all(np.diag(E @ E.T) == 2)

    def test_single_copy(self):
        graph = CouplingGraph.from_in_neighbors({0: [], 1: [0]})
        layouts = [Layout(0, 1, 1), Layout(0, 1, 1, (0,))]
        E1, E2 = assemble_consensus_matrix(graph, layouts)
        assert E1.shape[0] == E2.shape[0] == 1
        # copy of robot 1 inside robot 2 minus robot 1's own state
        assert E1[0, layouts[0].x(0)].tolist() == [-1.0]
        assert E2[0, layouts[1].w(0, 0)].tolist() == [1.0]
        assert np.abs(E1).sum() + np.abs(E2).sum() == 2

    def test_no_copies(self):
        costs = [StageCost(I2, I2, I2) for _ in range(2)]
        nlp = build_partial_nlp([RobotModel(0.2)] * 2, costs, _box(2), build_coupling_graph(costs, _box(2)),
                                3, np.zeros((2, 2)), np.zeros((2, 2)))
        assert nlp.E.shape[0] == 0

    def test_zero_iff_copies_match(self, rectangle_nlp):
        rng = np.random.default_rng(1)
        traj = rng.normal(size=(4, 8, 2))
        zs = []
        for sub in rectangle_nlp.subsystems:
            z = rng.normal(size=sub.n)
            lay = sub.layout
            for k in range(8):
                z[lay.x(k)] = traj[sub.index, k]
                for j in lay.in_neighbors:
                    z[lay.w(j, k)] = traj[j, k]
            zs.append(z)
        assert np.abs(rectangle_nlp.coupling_residual(zs)).max() == 0.0
        zs[2][rectangle_nlp.subsystems[2].layout.w(3, 5)] += 1e-3
        assert np.abs(rectangle_nlp.coupling_residual(zs)).max() > 0


class TestBuild:
    def test_smallest_instance(self):
        costs = [StageCost(I2, I2, I2)]
        nlp = build_partial_nlp([RobotModel(0.5)], costs, _box(1), build_coupling_graph(costs, _box(1)), 1,
                                [[1.0, 2.0]], [[0.1, -0.1]])
        sub = nlp.subsystems[0]
        assert sub.n == 6
        z = np.array([1.0, 2.0, 1.05, 1.95, 0.1, -0.1])
        g, _ = sub.eq(z)
        assert np.allclose(g, 0)
        assert sub.n_eq == 6
        assert nlp.E.shape[0] == 0

    def test_distance_rows(self):
        nlp = make_nlp(pairs={1: 0})
        sub = nlp.subsystems[1]
        assert len(sub.distance_rows) == 8
        assert all(r.bound == pytest.approx(0.16) and r.slack == sub.layout.slack for r in sub.distance_rows)
        assert [r.stage for r in sub.distance_rows] == list(range(8))

    def test_literal_units(self):
        costs = chain_costs(2, (20.0, 10.0))
        cons = _box(2, {1: [PairConstraint(0, 0.4)]})
        nlp = build_partial_nlp([RobotModel(0.2)] * 2, costs, cons, build_coupling_graph(costs, cons), 2,
                                np.zeros((2, 2)), np.zeros((2, 2)), literal_distance=True)
        assert nlp.subsystems[1].distance_rows[0].bound == pytest.approx(0.4)

    def test_distance_row_value_and_gradient(self):
        nlp = make_nlp(pairs={1: 0})
        sub = nlp.subsystems[1]
        lay = sub.layout
        z = np.zeros(sub.n)
        z[lay.x(0)] = [1.0, 0.0]
        _, _, h, Jh = eval_constraints(nlp, 1, z)
        r = sub.A_lin.shape[0]
        assert h[r] == pytest.approx(-0.84)
        assert Jh[r, lay.x(0)].tolist() == [-2.0, 0.0]
        assert Jh[r, lay.w(0, 0)].tolist() == [2.0, 0.0]
        assert Jh[r, lay.slack] == -1.0

    def test_dynamics_zero_on_rollout(self, rectangle_nlp):
        rng = np.random.default_rng(0)
        sub = rectangle_nlp.subsystems[2]
        lay = sub.layout
        z = rng.normal(size=sub.n)
        for k in range(lay.N):
            z[lay.x(k + 1)] = z[lay.x(k)] + 0.2 * z[lay.u(k)]
        g, _ = sub.eq(z)
        assert np.abs(g[:lay.N * 2]).max() <= 1e-15  # matrix-product roundoff only

    def test_rejects_indefinite_weights(self):
        costs = chain_costs()
        costs[3].Q_ii = -I2
        with pytest.raises(ValueError, match="positive definite"):
            check_weights(costs)
        with pytest.raises(ValueError):
            make_nlp_with(costs)

    def test_soft_penalty_required(self):
        costs = chain_costs(2, (20.0, 10.0))
        cons = _box(2, {1: [PairConstraint(0, 0.4)]})
        with pytest.raises(ValueError, match="penalty"):
            build_partial_nlp([RobotModel(0.2)] * 2, costs, cons, build_coupling_graph(costs, cons), 2,
                              np.zeros((2, 2)), np.zeros((2, 2)), soft_penalty=0.0)

    def test_cold_start_is_consistent(self, rectangle_nlp):
        x = np.array([[0.0, 0.0], [-0.4, 0.1], [-0.8, 0.0], [-1.2, -0.1]])
        zs = cold_start(rectangle_nlp, x)
        assert np.abs(rectangle_nlp.coupling_residual(zs)).max() == 0.0


def make_nlp_with(costs):
    cons = _box(len(costs))
    return build_partial_nlp([RobotModel(0.2)] * len(costs), costs, cons, build_coupling_graph(costs, cons), 2,
                             np.zeros((len(costs), 2)), np.zeros((len(costs), 2)))


def test_rectangle_weight_minors():
    Q, R, P = assemble_centralized_weights(chain_costs())
    skeleton = Q[0::2, 0::2]
    assert skeleton.tolist() == [[20, -10, 0, 0], [-10, 20, -10, 0], [0, -10, 20, -10], [0, 0, -10, 10]]
    assert np.allclose(leading_minors(skeleton), [20, 300, 4000, 10000])
    assert np.allclose(Q, P)
    assert np.linalg.eigvalsh(Q).min() > 0 and np.linalg.eigvalsh(R).min() > 0


def test_split_objective_matches_centralized():
    """On consistent copies the per-robot objectives add up to the centralized one (up to a constant)."""
    xbar = [[0.1, 0.2], [-0.3, 0.0], [-0.7, 0.1], [-1.0, -0.2]]
    nlp = make_nlp(xbar=xbar)
    ocp = centralized_ocp(nlp.models, nlp.costs, nlp.constraints, nlp.N, np.zeros((4, 2)), np.zeros((4, 2)))
    rng = np.random.default_rng(5)

    def both(X, U):
        zc = np.zeros(ocp.n)
        zs = []
        for i, sub in enumerate(nlp.subsystems):
            lay = sub.layout
            z = np.zeros(sub.n)
            for k in range(nlp.N + 1):
                z[lay.x(k)] = X[i, k]
                zc[ocp.x_index[i][k]] = X[i, k]
                for j in lay.in_neighbors:
                    z[lay.w(j, k)] = X[j, k]
            for k in range(nlp.N):
                z[lay.u(k)] = U[i, k]
                zc[ocp.u_index[i][k]] = U[i, k]
            zs.append(z)
        return sum(s.objective(z) for s, z in zip(nlp.subsystems, zs)), ocp.objective(zc)

    a_split, a_central = both(rng.normal(size=(4, 8, 2)), rng.normal(size=(4, 7, 2)))
    b_split, b_central = both(rng.normal(size=(4, 8, 2)), rng.normal(size=(4, 7, 2)))
    assert a_split - b_split == pytest.approx(a_central - b_central, rel=1e-12, abs=1e-10)


def test_split_objectives_convex(rectangle_nlp):
    for sub in rectangle_nlp.subsystems:
        assert np.linalg.eigvalsh(sub.H).min() >= -1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_jacobians_match_finite_differences(seed):
    nlp = make_nlp(pairs={1: 0, 2: 1, 3: 2})
    rng = np.random.default_rng(seed)
    for i, sub in enumerate(nlp.subsystems):
        z = rng.normal(size=sub.n)
        _, Jg, _, Jh = eval_constraints(nlp, i, z)
        for analytic, fun in ((Jg, lambda v: sub.eq(v)[0]), (Jh, lambda v: sub.ineq(v)[0])):
            fd = central_fd_jacobian(fun, z)
            assert np.abs(analytic - fd).max() <= 1e-5 * max(1.0, np.abs(analytic).max())


def test_soft_rows_always_feasible():
    nlp = make_nlp(pairs={1: 0, 2: 1})
    rng = np.random.default_rng(3)
    for sub in nlp.subsystems[1:3]:
        z = rng.normal(scale=0.1, size=sub.n)
        z[sub.layout.slack] = 0.0
        h, _ = sub.ineq(z)
        z[sub.layout.slack] = max(0.0, h[sub.A_lin.shape[0]:].max())
        h, _ = sub.ineq(z)
        assert h[sub.A_lin.shape[0]:].max() <= 1e-12
        assert -z[sub.layout.slack] <= 0.0


def test_patched_subsystem_changes_only_data(rectangle_nlp):
    x = np.array([[0.1, 0.0], [-0.3, 0.0], [-0.7, 0.0], [-1.1, 0.0]])
    u = np.full((4, 2), 0.05)
    xbar = np.array([[1.2, 0.0], [0.8, 0.0], [0.4, 0.0], [0.0, 0.0]])
    sub = rectangle_nlp.patched_subsystem(1, x[1], u[1], xbar)
    base = rectangle_nlp.subsystems[1]
    assert sub.H is base.H and sub.A_eq is base.A_eq
    lay = sub.layout
    assert np.array_equal(sub.b_eq[14:16], x[1]) and np.array_equal(sub.b_eq[16:18], u[1])
    assert np.array_equal(sub.zref[lay.x(3)], xbar[1])
    assert np.array_equal(sub.zref[lay.w(2, 0)], xbar[2])
