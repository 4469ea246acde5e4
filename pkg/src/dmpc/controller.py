"""Closed-loop distributed MPC of a robot formation.

Each MPC step at time ``t``:

* the OCP is posed with ``x^0`` the measured position and ``u^0`` the input
  already committed for ``[t, t + dt)``,
* the agents solve it cooperatively (ADMM or dSQP),
* ``u^1`` of the solution becomes the input for the next interval.

The previous solution, shifted by one stage, warm-starts the next solve. An
aborted solve keeps the committed input for one more interval.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .admm import AdmmState, LocalQP, SubsystemQPError, admm_agent
from .agents import AgentContext, IterateLog, TransportTimeout, lockstep_contexts, run_lockstep, run_threaded
from .dsqp import SqpIterate, dsqp_agent
from .messaging import (
    DEFAULT_GROUP,
    DEFAULT_PORT,
    DEFAULT_TIMEOUT,
    MeasurementMessage,
    SimMeasurements,
    UdpMeasurements,
    open_endpoints,
)
from .oracle import CentralizedOracle, residual_infnorm
from .problem import Layout, PartialNLP, Subsystem, build_coupling_graph, build_partial_nlp, cold_start
from .scenario import PlantModel, Scenario

log = logging.getLogger(__name__)

__all__ = [
    "ControllerState",
    "RunArtifacts",
    "plant_advance",
    "run_scenario",
    "shift_rows",
    "shift_stages",
    "warm_start_shift",
]


def plant_advance(plant: PlantModel, x, v, u_applied, dt: float, rng: np.random.Generator | None = None):
    """One interval of the simulated robot; returns ``(x_next, v_next)``."""
    x, v, u = (np.asarray(a, dtype=float) for a in (x, v, u_applied))
    v_next = v + (dt / plant.tau) * (u - v) if plant.tau > 0 else u.copy()
    x_next = x + dt * v_next
    if plant.sigma > 0:
        if rng is None:
            raise ValueError("a random generator is required when sigma > 0")
        x_next = x_next + rng.normal(0.0, plant.sigma, size=x_next.shape)
    return x_next, v_next


def shift_stages(layout: Layout, z, fill: str = "repeat") -> np.ndarray:
    """Move every stage block one stage forward.

    The vacated last stage repeats the previous last stage (``fill="repeat"``)
    or becomes zero (``fill="zero"``). The slack entry is left alone.
    """
    z = np.asarray(z, dtype=float)
    out = z.copy()
    N = layout.N
    groups = [(layout.x, N + 1)] + [((lambda k, j=j: layout.w(j, k)), N + 1) for j in layout.in_neighbors]
    if layout.nu:
        groups.append((layout.u, N))
    for block, count in groups:
        for k in range(count - 1):
            out[block(k)] = z[block(k + 1)]
        out[block(count - 1)] = z[block(count - 1)] if fill == "repeat" else 0.0
    return out


def shift_rows(values, stages, kinds) -> np.ndarray:
    """Shift multipliers of stage-indexed constraint rows forward; the last stage gets zeros.

    Rows tagged with stage ``-1`` (initial conditions, slack sign) keep their value.
    """
    values = np.asarray(values, dtype=float)
    out = np.zeros_like(values)
    position: dict[tuple[int, int, int], int] = {}
    seen: dict[tuple[int, int], int] = {}
    for r, (s, c) in enumerate(zip(stages, kinds)):
        offset = seen.get((c, s), 0)
        seen[(c, s)] = offset + 1
        position[(c, s, offset)] = r
    for (c, s, offset), r in position.items():
        if s < 0:
            out[r] = values[r]
            continue
        src = position.get((c, s + 1, offset))
        if src is not None:
            out[r] = values[src]
    return out


def warm_start_shift(sub: Subsystem, z, gamma, nu, mu):
    """Shifted primal guess plus duals with zero-filled tails."""
    return (shift_stages(sub.layout, z, "repeat"), shift_stages(sub.layout, gamma, "zero"),
            shift_rows(nu, sub.eq_stage, sub.eq_kind), shift_rows(mu, sub.ineq_stage, sub.ineq_kind))


@dataclass
class ControllerState:
    index: int
    committed: np.ndarray
    pending: np.ndarray
    admm: AdmmState | None = None
    sqp: SqpIterate | None = None
    local: LocalQP | None = None
    step: int = 0
    faults: int = 0


class Agent:
    """One robot's controller: owns its warm-start data and solver objects."""

    def __init__(self, index: int, scenario: Scenario, nlp: PartialNLP):
        self.index = index
        self.sc = scenario
        self.nlp = nlp
        self.state = ControllerState(index, np.zeros(2), np.zeros(2))

    def prepare(self, x_meas, xbar) -> Subsystem:
        st = self.state
        sub = self.nlp.patched_subsystem(self.index, x_meas, st.committed, xbar)
        if self.sc.method == "admm":
            if st.admm is None:
                z0 = cold_start(self.nlp, self.sc.initial, None)[self.index]
                z0[sub.layout.x(0)] = x_meas
                z0[sub.layout.u(0)] = st.committed
                st.admm = AdmmState.cold(z0)
            else:
                zbar, gamma, _, _ = warm_start_shift(sub, st.admm.zbar, st.admm.gamma,
                                                     np.zeros(sub.n_eq), np.zeros(sub.n_ineq))
                st.admm.zbar, st.admm.gamma = zbar, gamma
            if st.local is None:
                st.local = LocalQP.for_subsystem(sub, self.sc.admm.rho)
        else:
            if st.sqp is None:
                z0 = cold_start(self.nlp, self.sc.initial, None)[self.index]
                z0[sub.layout.x(0)] = x_meas
                z0[sub.layout.u(0)] = st.committed
                st.sqp = SqpIterate.cold(sub, z0)
            else:
                it = st.sqp
                it.z, it.gamma, it.nu, it.mu = warm_start_shift(sub, it.z, it.gamma, it.nu, it.mu)
        return sub

    def solve(self, ctx: AgentContext, sub: Subsystem, step: int):
        st = self.state
        if self.sc.method == "admm":
            z = yield from admm_agent(ctx, self.index, self.nlp, st.admm, self.sc.admm, st.local, sub, step)
        else:
            z = yield from dsqp_agent(ctx, self.index, self.nlp, st.sqp, self.sc.dsqp, sub, step)
        return z[sub.layout.u(1)].copy()

    def finish(self, u_next) -> None:
        st = self.state
        if isinstance(u_next, BaseException):
            st.faults += 1
            st.pending = st.committed.copy()
        else:
            st.pending = np.asarray(u_next, dtype=float)


@dataclass
class RunArtifacts:
    trajectory: list[tuple] = field(default_factory=list)
    residual: list[tuple] = field(default_factory=list)
    timing: list[tuple] = field(default_factory=list)
    faults: list[tuple] = field(default_factory=list)
    status: int = 0
    message: str = ""
    wall_seconds: float = 0.0


FAULTS = (TransportTimeout, SubsystemQPError, np.linalg.LinAlgError)


def run_scenario(sc: Scenario, transport: str = "inproc", seed: int = 0, steps: int | None = None,
                 iterate_log: IterateLog | None = None, loss_rate: float = 0.0,
                 group: str = DEFAULT_GROUP, base_port: int = DEFAULT_PORT, timeout: float = DEFAULT_TIMEOUT,
                 realtime: bool = False, progress: Callable[[int, int], None] | None = None) -> RunArtifacts:
    """Simulate the closed loop and collect the trajectory, residual and timing rows.

    ``transport="inproc"`` runs all agents in lockstep in this thread;
    ``"udp"`` gives every agent its own thread and multicast endpoint and
    delivers measurements over the network as well.
    """
    wall0 = time.perf_counter()
    S, dt = sc.size, sc.dt
    rng = np.random.default_rng(seed)
    models = sc.models
    graph = build_coupling_graph(sc.costs, sc.constraints)
    nlp = build_partial_nlp(models, sc.costs_at(0.0), sc.constraints, graph, sc.N, sc.initial, np.zeros((S, 2)),
                            sc.soft_penalty, sc.literal_distance)
    agents = [Agent(i, sc, nlp) for i in range(S)]
    oracle = CentralizedOracle(models, sc.costs, sc.constraints, sc.N, sc.soft_penalty, sc.literal_distance) \
        if sc.oracle else None
    n_steps = sc.steps if steps is None else steps
    art = RunArtifacts()

    x = sc.initial.astype(float).copy()
    v = np.zeros((S, 2))
    endpoints = None
    meas = SimMeasurements()
    if transport == "udp":
        sid = (sc.scenario_id ^ (seed * 2654435761) ^ time.time_ns()) & 0xFFFFFFFF
        endpoints = open_endpoints("udp", range(S), sid, group, base_port, loss_rate, seed)
        meas = UdpMeasurements(group, base_port + 1)
        for i in range(S):
            meas.seed(MeasurementMessage(i, 0, x[i].copy()))
    elif transport != "inproc":
        raise ValueError(f"unknown transport {transport!r}")
    last_ts = [-1] * S
    t_start = time.monotonic()
    try:
        for k in range(n_steps):
            t = k * dt
            if realtime:
                time.sleep(max(0.0, t_start + t - time.monotonic()))
            xbar = sc.schedule.at(t)
            stamp = k + 1
            for i in range(S):
                meas.publish(MeasurementMessage(i, stamp, x[i].copy()))
            x_meas = np.empty((S, 2))
            for i in range(S):
                msg, stale = meas.await_measurement(i, 0.05, newer_than=last_ts[i])
                if stale:
                    log.warning("step %d: stale measurement for robot %d", k, i + 1)
                last_ts[i] = msg.timestamp_ns
                x_meas[i] = msg.position
            committed = np.array([a.state.committed for a in agents])

            subs = [a.prepare(x_meas[i], xbar) for i, a in enumerate(agents)]
            contexts = lockstep_contexts(range(S)) if transport == "inproc" else \
                {i: AgentContext(i) for i in range(S)}
            gens = {i: agents[i].solve(contexts[i], subs[i], k) for i in range(S)}
            if transport == "inproc":
                try:
                    results = run_lockstep(gens, contexts, trace=iterate_log)
                except FAULTS as exc:
                    results = {i: exc for i in range(S)}
            else:
                results = run_threaded(gens, endpoints, timeout, trace=iterate_log)
            for i, a in enumerate(agents):
                res = results.get(i, RuntimeError("agent produced no result"))
                if isinstance(res, BaseException) and not isinstance(res, FAULTS):
                    raise res
                if isinstance(res, BaseException):
                    art.faults.append((t, i + 1, type(res).__name__, str(res)))
                    log.warning("step %d robot %d: %s, holding previous input", k, i + 1, res)
                a.finish(res)
            u_next = np.array([a.state.pending for a in agents])

            if oracle is not None:
                orc = oracle(x_meas, committed, xbar)
                status = "ok" if orc.converged else "not_converged"
                if any(r for r in art.faults if r[0] == t):
                    status = "fault"
                resid = residual_infnorm(u_next, orc.u_next)
            else:
                status, resid = "disabled", float("nan")
            art.residual.append((t, resid, status))
            for i in range(S):
                art.trajectory.append((t, i + 1, x[i, 0], x[i, 1], committed[i, 0], committed[i, 1],
                                       xbar[i, 0], xbar[i, 1]))
                for label, micros in contexts[i].timings:
                    art.timing.append((t, i + 1, label, micros))

            for i in range(S):
                x[i], v[i] = plant_advance(sc.plant, x[i], v[i], committed[i], dt, rng)
            for a in agents:
                a.state.committed = a.state.pending.copy()
                a.state.step += 1
            if progress is not None:
                progress(k + 1, n_steps)
    except Exception as exc:  # partial artifacts are still written by the caller
        art.status = 1
        art.message = f"{type(exc).__name__}: {exc}"
        log.exception("run aborted")
    finally:
        if endpoints is not None:
            for ep in endpoints.values():
                ep.close()
        meas.close()
        art.wall_seconds = time.perf_counter() - wall0
    return art
