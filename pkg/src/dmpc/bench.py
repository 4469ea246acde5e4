"""Randomized solver benchmarks against centralized reference solutions.

Two suites:

* ``convex``: random formation QPs (2 to 5 robots, chain or star coupling).
  Reports the ADMM distance to the centralized KKT solution and the
  difference between ADMM and single-iteration Gauss-Newton dSQP.
* ``qcqp``: a two-robot problem with a hard minimum-distance constraint.
  dSQP starts near a KKT point; the suite reports outer error ratios.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .admm import AdmmConfig, AdmmState, run_admm
from .dsqp import DsqpConfig, SqpIterate, error_ratios, run_dsqp, run_dsqp_exact, superlinear_signature
from .oracle import solve_sqp, stack_partial_nlp
from .problem import (
    ConstraintSet,
    PairConstraint,
    PartialNLP,
    RobotModel,
    StageCost,
    build_coupling_graph,
    build_partial_nlp,
    cold_start,
)

__all__ = [
    "ConvexRecord",
    "KktPoint",
    "QcqpRecord",
    "convex_suite",
    "format_convex",
    "format_qcqp",
    "kkt_point",
    "perturbed_iterates",
    "qcqp_suite",
    "qcqp_toy",
    "random_convex_instance",
]


@dataclass
class Instance:
    nlp: PartialNLP
    x_now: np.ndarray
    u_now: np.ndarray
    topology: str
    seed: int


def _random_pd(rng: np.random.Generator, scale: float) -> np.ndarray:
    A = rng.normal(size=(2, 2))
    return scale * (A @ A.T / 2 + 0.5 * np.eye(2))


def random_convex_instance(seed: int) -> Instance:
    """Formation QP with random weights, bounds, states and setpoints.

    Every diagonal weight exceeds the sum of the absolute coupling blocks so
    that each robot's share of the cost is convex on its own.
    """
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, 6))
    topology = "chain" if rng.random() < 0.5 else "star"
    N = int(rng.choice([2, 3, 4]))
    edges = [(i, i + 1) for i in range(S - 1)] if topology == "chain" else [(0, i) for i in range(1, S)]
    Qij: list[dict[int, np.ndarray]] = [{} for _ in range(S)]
    for i, j in edges:
        M = rng.uniform(-3.0, 3.0, size=(2, 2))
        Qij[i][j] = M
        Qij[j][i] = M.T
    costs = []
    for i in range(S):
        dominance = sum(np.linalg.norm(M, 2) for M in Qij[i].values()) * np.eye(2)
        Qii = dominance + _random_pd(rng, rng.uniform(1.0, 10.0))
        costs.append(StageCost(Qii, _random_pd(rng, rng.uniform(0.1, 2.0)), Qii, Qij[i], Qij[i],
                               xbar=rng.uniform(-1.0, 1.0, size=2)))
    bound = rng.uniform(0.2, 1.0)
    constraints = [ConstraintSet(-bound * np.ones(2), bound * np.ones(2)) for _ in range(S)]
    graph = build_coupling_graph(costs, constraints)
    x_now = rng.uniform(-1.0, 1.0, size=(S, 2))
    u_now = rng.uniform(-bound, bound, size=(S, 2))
    nlp = build_partial_nlp([RobotModel(0.2)] * S, costs, constraints, graph, N, x_now, u_now)
    return Instance(nlp, x_now, u_now, topology, seed)


def qcqp_toy() -> Instance:
    """Two robots, horizon 2; robot 2 must stay 0.4 m from robot 1 and is pulled toward it."""
    I = np.eye(2)
    costs = [StageCost(20 * I, I, 20 * I, {1: -10 * I}, {1: -10 * I}, xbar=np.zeros(2)),
             StageCost(20 * I, I, 20 * I, {0: -10 * I}, {0: -10 * I}, xbar=np.array([-0.3, 0.0]))]
    constraints = [ConstraintSet(-10 * np.ones(2), 10 * np.ones(2)),
                   ConstraintSet(-10 * np.ones(2), 10 * np.ones(2), pairs=[PairConstraint(0, 0.4, soft=False)])]
    graph = build_coupling_graph(costs, constraints)
    x_now = np.array([[0.0, 0.0], [-0.42, 0.05]])
    u_now = np.zeros((2, 2))
    nlp = build_partial_nlp([RobotModel(0.2)] * 2, costs, constraints, graph, 2, x_now, u_now)
    return Instance(nlp, x_now, u_now, "chain", 0)


@dataclass
class KktPoint:
    zs: list[np.ndarray]
    nus: list[np.ndarray]
    mus: list[np.ndarray]
    lam: np.ndarray
    converged: bool

    def stacked(self) -> np.ndarray:
        return np.concatenate(self.zs + self.nus + self.mus + [self.lam])


def kkt_point(inst: Instance, tol: float = 1e-12) -> KktPoint:
    """Primal-dual solution of the split problem, solved as one centralized problem."""
    nlp = inst.nlp
    res = solve_sqp(stack_partial_nlp(nlp), np.concatenate(cold_start(nlp, inst.x_now, inst.u_now)), tol=tol)
    n_eq = np.cumsum([0] + [s.n_eq for s in nlp.subsystems])
    n_in = np.cumsum([0] + [s.n_ineq for s in nlp.subsystems])
    nus = [res.nu[n_eq[i]:n_eq[i + 1]] for i in range(nlp.size)]
    mus = [res.mu[n_in[i]:n_in[i + 1]] for i in range(nlp.size)]
    return KktPoint(nlp.split(res.z), nus, mus, res.nu[n_eq[-1]:], res.converged)


def perturbed_iterates(inst: Instance, star: KktPoint, radius: tuple[float, float], rng: np.random.Generator):
    """Iterates at a random distance in ``radius`` from ``star``; multipliers of inequalities stay nonnegative."""
    p = star.stacked()
    d = rng.normal(size=p.size)
    d *= rng.uniform(*radius) / np.linalg.norm(d)
    p = p + d
    nlp = inst.nlp
    its, k = [], 0
    parts = {"z": [], "nu": [], "mu": []}
    for name, sizes in (("z", [s.n for s in nlp.subsystems]), ("nu", [s.n_eq for s in nlp.subsystems]),
                        ("mu", [s.n_ineq for s in nlp.subsystems])):
        for n in sizes:
            parts[name].append(p[k:k + n].copy())
            k += n
    lam = p[k:]
    for i, sub in enumerate(nlp.subsystems):
        its.append(SqpIterate(parts["z"][i], parts["nu"][i], np.maximum(parts["mu"][i], 0.0),
                              nlp.E_blocks[i].T @ lam))
    return its, lam


def _stacked_error(zs, nus, mus, lam, star: KktPoint) -> float:
    return float(np.linalg.norm(np.concatenate(list(zs) + list(nus) + list(mus) + [lam]) - star.stacked()))


@dataclass
class ConvexRecord:
    seed: int
    robots: int
    topology: str
    horizon: int
    admm_error: float
    equivalence_delta: float
    iterations_to_tol: int | None
    oracle_converged: bool
    admm_seconds: float = 0.0
    oracle_seconds: float = 0.0


def convex_suite(instances: int = 100, seed: int = 0, l_max: int = 500, rho: float = 1.0,
                 tol: float = 1e-6, equivalence_l_max: int | None = None) -> list[ConvexRecord]:
    """ADMM accuracy and ADMM/dSQP equivalence on seeded random formation QPs."""
    records = []
    eq_l = l_max if equivalence_l_max is None else equivalence_l_max
    for n in range(instances):
        inst = random_convex_instance(seed + n)
        nlp = inst.nlp
        t0 = time.perf_counter()
        star = kkt_point(inst)
        oracle_seconds = time.perf_counter() - t0
        z0 = cold_start(nlp, inst.x_now, inst.u_now)

        round_err: dict[int, float] = {}

        def track(i, l, res, star=star):
            e = float(np.abs(res.z - star.zs[i]).max())
            round_err[l] = max(round_err.get(l, 0.0), e)

        states = [AdmmState.cold(z) for z in z0]
        t0 = time.perf_counter()
        zs = run_admm(nlp, states, AdmmConfig(rho, l_max), after_round=track)
        seconds = time.perf_counter() - t0
        err = max(float(np.abs(z - s).max()) for z, s in zip(zs, star.zs))
        hit = next((l + 1 for l in sorted(round_err) if round_err[l] <= tol), None)

        states = [AdmmState.cold(z) for z in z0]
        za = run_admm(nlp, states, AdmmConfig(rho, eq_l))
        its = [SqpIterate.cold(sub, z) for sub, z in zip(nlp.subsystems, z0)]
        zd = run_dsqp(nlp, its, DsqpConfig(q_max=1, l_max=eq_l, rho=rho, hessian="gauss_newton"))
        delta = max(float(np.abs(a[s.layout.u(1)] - b[s.layout.u(1)]).max())
                    for a, b, s in zip(za, zd, nlp.subsystems))
        records.append(ConvexRecord(inst.seed, nlp.size, inst.topology, nlp.N, err, delta, hit, star.converged,
                                    seconds, oracle_seconds))
    return records


@dataclass
class QcqpRecord:
    trial: int
    initial_distance: float
    errors: list[float] = field(default_factory=list)
    superlinear: bool = False
    superlinear_strict: bool = False

    @property
    def ratios(self) -> list[float]:
        return [float(r) for r in error_ratios(self.errors)]


def qcqp_suite(trials: int = 50, seed: int = 0, q_max: int = 6, inner: str = "exact",
               radius: tuple[float, float] = (0.05, 0.1), l_max: int = 200, floor: float = 1e-12,
               window: int = 4) -> list[QcqpRecord]:
    """Outer convergence of dSQP with regularized exact Hessians from perturbed KKT points.

    ``inner="exact"`` solves each coupled QP centrally; ``inner="dynamic"``
    runs ADMM with the dynamic stopping rule.
    """
    inst = qcqp_toy()
    nlp = inst.nlp
    star = kkt_point(inst)
    rng = np.random.default_rng(seed)
    records = []
    for trial in range(trials):
        its, lam = perturbed_iterates(inst, star, radius, rng)
        rec = QcqpRecord(trial, _stacked_error([i.z for i in its], [i.nu for i in its], [i.mu for i in its], lam, star))
        config = DsqpConfig(q_max=q_max, l_max=l_max, hessian="regularized_exact",
                            stopping="dynamic" if inner == "dynamic" else "fixed")
        if inner == "exact":
            history = run_dsqp_exact(nlp, its, config, lam)
            rec.errors = [_stacked_error(*h, star) for h in history]
        elif inner == "dynamic":
            rec.errors = [rec.initial_distance]
            one = DsqpConfig(q_max=1, l_max=l_max, hessian="regularized_exact", stopping="dynamic")
            for q in range(q_max):
                run_dsqp(nlp, its, one, step=q)
                lam_q = np.linalg.lstsq(nlp.E.T, np.concatenate([i.gamma for i in its]), rcond=None)[0]
                rec.errors.append(_stacked_error([i.z for i in its], [i.nu for i in its],
                                                 [i.mu for i in its], lam_q, star))
        else:
            raise ValueError(f"inner must be 'exact' or 'dynamic', got {inner!r}")
        rec.superlinear = superlinear_signature(rec.errors, window, floor)
        rec.superlinear_strict = superlinear_signature(rec.errors, window, 0.0)
        records.append(rec)
    return records


def format_convex(records: list[ConvexRecord]) -> str:
    if not records:
        return "convex suite: no instances"
    lines = ["seed robots topology N  admm_err   dsqp_delta  iters_to_tol oracle"]
    for r in records:
        lines.append(f"{r.seed:>4} {r.robots:>6} {r.topology:<8} {r.horizon} {r.admm_error:9.2e}  "
                     f"{r.equivalence_delta:9.2e}  {str(r.iterations_to_tol):>12} "
                     f"{'ok' if r.oracle_converged else 'NOT CONVERGED'}")
    errs = [r.admm_error for r in records]
    deltas = [r.equivalence_delta for r in records]
    lines.append(f"max admm error {max(errs):.2e}; max ADMM/dSQP delta {max(deltas):.2e}")
    return "\n".join(lines)


def format_qcqp(records: list[QcqpRecord]) -> str:
    if not records:
        return "qcqp suite: no instances"
    lines = ["trial  dist0     errors (outer iterations)"]
    for r in records:
        errs = " ".join(f"{e:.1e}" for e in r.errors)
        lines.append(f"{r.trial:>5}  {r.initial_distance:.3f}  {errs}  {'superlinear' if r.superlinear else '-'}")
    frac = sum(r.superlinear for r in records) / len(records)
    strict = sum(r.superlinear_strict for r in records) / len(records)
    vanishing = sum(1 for r in records if r.ratios and _vanishing(r.errors)) / len(records)
    lines.append(f"superlinear signature: {frac:.0%} (without precision floor: {strict:.0%}); "
                 f"vanishing ratios: {vanishing:.0%}")
    return "\n".join(lines)


def _vanishing(errors, floor: float = 1e-12) -> bool:
    """Last meaningful ratio below 0.1, or the error reached ``floor``."""
    e = np.asarray(errors)
    if e.min() <= floor:
        return True
    r = error_ratios(e)
    return bool(r.size and math.isfinite(r[-1]) and r[-1] < 0.1)
