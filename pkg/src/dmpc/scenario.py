"""Scenario files: TOML description of a formation-control experiment.

Robots are numbered from 1 in files and CSV output, from 0 internally.
See ``scenarios/rectangle.toml`` for an annotated example.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .admm import AdmmConfig
from .dsqp import HESSIANS, STOPPING, DsqpConfig
from .problem import (
    DEFAULT_SOFT_PENALTY,
    ConstraintSet,
    PairConstraint,
    RobotModel,
    StageCost,
    assemble_centralized_weights,
    build_coupling_graph,
    leading_minors,
)

__all__ = [
    "PlantModel",
    "Scenario",
    "ScenarioError",
    "Schedule",
    "apply_overrides",
    "builtin_scenarios",
    "load_scenario",
    "parse_scenario",
    "validate_scenario",
]

OVERRIDE_KEYS = {
    "rho": float,
    "l_max": int,
    "q_max": int,
    "hessian": str,
    "stopping": str,
    "duration": float,
    "sigma": float,
    "tau": float,
    "pairs": str,
    "oracle": str,
}
DSQP_ONLY = {"q_max", "hessian", "stopping"}


class ScenarioError(ValueError):
    """Invalid scenario file or override."""


@dataclass(frozen=True)
class PlantModel:
    """Velocity lag ``tau`` (s) and additive position noise ``sigma`` (m) per axis."""

    tau: float = 0.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.tau < 0 or self.sigma < 0:
            raise ScenarioError("plant tau and sigma must be nonnegative")


@dataclass
class Segment:
    start: float
    end: float
    setpoints: np.ndarray


@dataclass
class Schedule:
    """Piecewise-constant setpoints; a time on a boundary belongs to the later segment."""

    segments: list[Segment]

    def at(self, t: float) -> np.ndarray:
        for seg in reversed(self.segments):
            if seg.start <= t + 1e-9:
                return seg.setpoints
        return self.segments[0].setpoints

    def change_times(self) -> list[float]:
        out = [self.segments[0].start]
        for prev, seg in zip(self.segments, self.segments[1:]):
            if not np.array_equal(prev.setpoints, seg.setpoints):
                out.append(seg.start)
        return out

    def gaps(self, duration: float, tol: float = 1e-9) -> list[tuple[float, float]]:
        """Uncovered subintervals of ``[0, duration]``."""
        gaps, t = [], 0.0
        for seg in sorted(self.segments, key=lambda s: s.start):
            if seg.start > t + tol:
                gaps.append((t, seg.start))
            t = max(t, seg.end)
        if t < duration - tol:
            gaps.append((t, duration))
        return gaps


@dataclass
class Scenario:
    name: str
    dt: float
    N: int
    initial: np.ndarray
    costs: list[StageCost]
    constraints: list[ConstraintSet]
    schedule: Schedule
    duration: float
    method: str = "admm"
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    dsqp: DsqpConfig = field(default_factory=DsqpConfig)
    plant: PlantModel = field(default_factory=PlantModel)
    soft_penalty: float = DEFAULT_SOFT_PENALTY
    literal_distance: bool = False
    oracle: bool = True
    source: str | None = None

    @property
    def size(self) -> int:
        return len(self.costs)

    @property
    def models(self) -> list[RobotModel]:
        return [RobotModel(self.dt) for _ in range(self.size)]

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def scenario_id(self) -> int:
        return zlib.crc32(self.name.encode())

    def costs_at(self, t: float) -> list[StageCost]:
        xbar = self.schedule.at(t)
        return [replace(c, xbar=xbar[i]) for i, c in enumerate(self.costs)]


def _err(path: str, msg: str) -> ScenarioError:
    return ScenarioError(f"{path}: {msg}")


def _matrix(value, path: str, shape=(2, 2)) -> np.ndarray:
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise _err(path, f"expected a numeric matrix ({exc})") from None
    if M.ndim == 0:
        M = M * np.eye(shape[0])
    elif M.ndim == 1 and M.shape[0] == shape[0]:
        M = np.diag(M)
    if M.shape != shape:
        raise _err(path, f"expected shape {shape}, got {M.shape}")
    return M


def _vector(value, path: str, n: int = 2) -> np.ndarray:
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise _err(path, f"expected a numeric vector ({exc})") from None
    if v.ndim == 0:
        v = np.full(n, float(v))
    if v.shape != (n,):
        raise _err(path, f"expected {n} values, got shape {v.shape}")
    return v


def _per_robot(value, path: str, S: int) -> list[np.ndarray]:
    """Scalar or 2x2 matrix for every robot, a list of per-robot scalars, or a list of matrices."""
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise _err(path, "expected a number, a matrix or one entry per robot") from None
    if arr.ndim in (0, 2):
        return [_matrix(arr, path) for _ in range(S)]
    if arr.shape[0] != S:
        raise _err(path, f"expected {S} per-robot entries, got {arr.shape[0]}")
    return [_matrix(m, f"{path}[{i + 1}]") for i, m in enumerate(arr)]


def _check_keys(table: dict, allowed: set[str], path: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise _err(path, f"unknown key(s) {', '.join(unknown)}")


def _robot_id(value, path: str, S: int) -> int:
    if not isinstance(value, int) or not 1 <= value <= S:
        raise _err(path, f"robot id must be an integer in 1..{S}, got {value!r}")
    return value - 1


def _couplings(entries, path: str, S: int) -> dict[tuple[int, int], np.ndarray]:
    blocks: dict[tuple[int, int], np.ndarray] = {}
    for n, entry in enumerate(entries or []):
        p = f"{path}[{n + 1}]"
        _check_keys(entry, {"i", "j", "matrix"}, p)
        for key in ("i", "j", "matrix"):
            if key not in entry:
                raise _err(p, f"missing key {key}")
        i, j = _robot_id(entry["i"], f"{p}.i", S), _robot_id(entry["j"], f"{p}.j", S)
        if i == j:
            raise _err(p, "coupling block needs two different robots; use Qii for diagonal blocks")
        blocks[(i, j)] = _matrix(entry["matrix"], f"{p}.matrix")
    for (i, j), M in list(blocks.items()):
        blocks.setdefault((j, i), M.T.copy())
    return blocks


def parse_scenario(data: dict[str, Any], name: str = "scenario", source: str | None = None) -> Scenario:
    _check_keys(data, {"name", "duration", "robots", "cost", "bounds", "pairs", "schedule", "solver", "plant"}, "<root>")
    for section in ("robots", "cost", "bounds", "schedule"):
        if section not in data:
            raise _err("<root>", f"missing section [{section}]")
    robots = data["robots"]
    _check_keys(robots, {"count", "dt", "horizon", "initial"}, "robots")
    S = robots.get("count")
    if not isinstance(S, int) or S < 1:
        raise _err("robots.count", "must be a positive integer")
    dt = float(robots.get("dt", 0.0))
    if not dt > 0:
        raise _err("robots.dt", "must be positive")
    N = robots.get("horizon")
    if not isinstance(N, int) or N < 1:
        raise _err("robots.horizon", "must be an integer >= 1")
    initial = np.asarray(robots.get("initial"), dtype=float)
    if initial.shape != (S, 2):
        raise _err("robots.initial", f"expected {S} positions of 2 values, got shape {initial.shape}")

    cost = data["cost"]
    _check_keys(cost, {"Qii", "Qij", "R", "P", "Pii", "Pij"}, "cost")
    if "Qii" not in cost or "R" not in cost:
        raise _err("cost", "Qii and R are required")
    Qii = _per_robot(cost["Qii"], "cost.Qii", S)
    R = _per_robot(cost["R"], "cost.R", S)
    Qij = _couplings(cost.get("Qij"), "cost.Qij", S)
    if "Pii" in cost:
        if "P" in cost:
            raise _err("cost.P", "give either P = \"Q\" or Pii/Pij, not both")
        Pii = _per_robot(cost["Pii"], "cost.Pii", S)
        Pij = _couplings(cost.get("Pij"), "cost.Pij", S)
    elif cost.get("P", "Q") == "Q":
        Pii, Pij = Qii, Qij
    else:
        raise _err("cost.P", f"expected \"Q\", got {cost['P']!r}; use Pii/Pij for a separate terminal weight")

    bounds = data["bounds"]
    _check_keys(bounds, {"input_lower", "input_upper", "state_lower", "state_upper"}, "bounds")
    lo = _vector(bounds.get("input_lower"), "bounds.input_lower")
    hi = _vector(bounds.get("input_upper"), "bounds.input_upper")
    slo = shi = None
    if "state_lower" in bounds or "state_upper" in bounds:
        slo = _vector(bounds.get("state_lower"), "bounds.state_lower")
        shi = _vector(bounds.get("state_upper"), "bounds.state_upper")

    pairs_tbl = data.get("pairs", {})
    _check_keys(pairs_tbl, {"min_distance", "soft", "literal_units", "soft_penalty", "links"}, "pairs")
    pair_lists: list[list[PairConstraint]] = [[] for _ in range(S)]
    links = pairs_tbl.get("links", [])
    if links:
        d = float(pairs_tbl.get("min_distance", 0.0))
        if not d > 0:
            raise _err("pairs.min_distance", "must be positive when links are given")
        soft = bool(pairs_tbl.get("soft", True))
        for n, link in enumerate(links):
            if not isinstance(link, list) or len(link) != 2:
                raise _err(f"pairs.links[{n + 1}]", "expected [robot, neighbor]")
            i = _robot_id(link[0], f"pairs.links[{n + 1}][1]", S)
            j = _robot_id(link[1], f"pairs.links[{n + 1}][2]", S)
            if i == j:
                raise _err(f"pairs.links[{n + 1}]", "a robot cannot keep distance to itself")
            pair_lists[i].append(PairConstraint(j, d, soft))
    soft_penalty = float(pairs_tbl.get("soft_penalty", DEFAULT_SOFT_PENALTY))
    literal = bool(pairs_tbl.get("literal_units", False))

    constraints = [ConstraintSet(lo, hi, slo, shi, pair_lists[i]) for i in range(S)]
    costs = [
        StageCost(Qii[i], R[i], Pii[i],
                  {j: M for (a, j), M in Qij.items() if a == i},
                  {j: M for (a, j), M in Pij.items() if a == i})
        for i in range(S)
    ]

    sched = data["schedule"]
    _check_keys(sched, {"offset", "segment"}, "schedule")
    offset = _vector(sched.get("offset", [0.0, 0.0]), "schedule.offset")
    segments = []
    for n, seg in enumerate(sched.get("segment", [])):
        p = f"schedule.segment[{n + 1}]"
        _check_keys(seg, {"start", "end", "leader", "setpoints"}, p)
        if "start" not in seg or "end" not in seg:
            raise _err(p, "start and end are required")
        start, end = float(seg["start"]), float(seg["end"])
        if end <= start:
            raise _err(p, "end must be after start")
        if ("leader" in seg) == ("setpoints" in seg):
            raise _err(p, "give exactly one of leader or setpoints")
        if "leader" in seg:
            lead = _vector(seg["leader"], f"{p}.leader")
            pts = np.array([lead + i * offset for i in range(S)])
        else:
            pts = np.asarray(seg["setpoints"], dtype=float)
            if pts.shape != (S, 2):
                raise _err(f"{p}.setpoints", f"expected {S} positions, got shape {pts.shape}")
        segments.append(Segment(start, end, pts))
    if not segments:
        raise _err("schedule", "at least one [[schedule.segment]] is required")
    segments.sort(key=lambda s: s.start)
    duration = float(data.get("duration", segments[-1].end))

    solver = data.get("solver", {})
    _check_keys(solver, {"method", "rho", "l_max", "q_max", "hessian", "stopping", "eps_reg"}, "solver")
    method = solver.get("method", "admm")
    if method not in ("admm", "dsqp"):
        raise _err("solver.method", f"expected admm or dsqp, got {method!r}")
    if method == "admm" and any(pair_lists):
        raise _err("solver.method", "distance constraints make the problem nonconvex; use dsqp")
    try:
        admm = AdmmConfig(float(solver.get("rho", 1.0)), int(solver.get("l_max", 5)))
        dsqp = DsqpConfig(int(solver.get("q_max", 5)), int(solver.get("l_max", 3)), float(solver.get("rho", 1.0)),
                          solver.get("hessian", "gauss_newton"), float(solver.get("eps_reg", 1e-4)),
                          solver.get("stopping", "fixed"))
    except ValueError as exc:
        raise _err("solver", str(exc)) from None

    plant_tbl = data.get("plant", {})
    _check_keys(plant_tbl, {"tau", "sigma"}, "plant")
    plant = PlantModel(float(plant_tbl.get("tau", 0.0)), float(plant_tbl.get("sigma", 0.0)))

    return Scenario(
        name=str(data.get("name", name)), dt=dt, N=N, initial=initial, costs=costs, constraints=constraints,
        schedule=Schedule(segments), duration=duration, method=method, admm=admm, dsqp=dsqp, plant=plant,
        soft_penalty=soft_penalty, literal_distance=literal, source=source,
    )


def builtin_scenarios() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("dmpc.scenarios").iterdir() if p.name.endswith(".toml"))


def _read_source(name_or_path: str) -> tuple[str, str, str]:
    path = Path(name_or_path)
    if path.suffix == ".toml" or path.exists():
        if not path.is_file():
            raise ScenarioError(f"scenario file {path} not found")
        return path.read_text(), path.stem, str(path)
    res = resources.files("dmpc.scenarios") / f"{name_or_path}.toml"
    if not res.is_file():
        raise ScenarioError(f"unknown scenario {name_or_path!r}; built-in: {', '.join(builtin_scenarios())}")
    return res.read_text(), name_or_path, f"builtin:{name_or_path}"


def load_scenario(name_or_path: str) -> Scenario:
    """Load a built-in scenario by name or a TOML file by path."""
    text, name, source = _read_source(name_or_path)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"{source}: {exc}") from None
    return parse_scenario(data, name, source)


def apply_overrides(sc: Scenario, overrides: dict[str, str]) -> Scenario:
    """Apply ``key=value`` overrides after type checks against the solver selection."""
    sc = replace(sc)
    admm, dsqp = {}, {}
    for key, raw in overrides.items():
        if key not in OVERRIDE_KEYS:
            raise ScenarioError(f"override {key!r} is not recognized; allowed: {', '.join(sorted(OVERRIDE_KEYS))}")
        try:
            value = OVERRIDE_KEYS[key](raw)
        except ValueError:
            raise ScenarioError(f"override {key!r}: cannot read {raw!r} as {OVERRIDE_KEYS[key].__name__}") from None
        if key in DSQP_ONLY and sc.method != "dsqp":
            raise ScenarioError(f"override {key!r} only applies to the dsqp solver, scenario uses {sc.method}")
        if key == "hessian" and value not in HESSIANS:
            raise ScenarioError(f"override 'hessian' must be one of {HESSIANS}")
        if key == "stopping" and value not in STOPPING:
            raise ScenarioError(f"override 'stopping' must be one of {STOPPING}")
        if key in ("rho", "l_max"):
            admm[key] = value
            dsqp[key] = value
        elif key in DSQP_ONLY:
            dsqp[key] = value
        elif key == "duration":
            if not value > 0:
                raise ScenarioError("override 'duration' must be positive")
            sc.duration = value
        elif key in ("sigma", "tau"):
            sc.plant = replace(sc.plant, **{key: value})
        elif key == "pairs":
            if value not in ("on", "off"):
                raise ScenarioError("override 'pairs' must be on or off")
            if value == "off":
                sc.constraints = [replace(c, pairs=[]) for c in sc.constraints]
        elif key == "oracle":
            if value not in ("on", "off"):
                raise ScenarioError("override 'oracle' must be on or off")
            sc.oracle = value == "on"
    try:
        sc.admm = replace(sc.admm, **admm)
        sc.dsqp = replace(sc.dsqp, **dsqp)
    except ValueError as exc:
        raise ScenarioError(f"override: {exc}") from None
    return sc


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def validate_scenario(sc: Scenario) -> list[CheckResult]:
    """Weight definiteness, graph symmetry, bound sanity and schedule coverage."""
    checks = []
    Q, R, P = assemble_centralized_weights(sc.costs)
    S = sc.size
    for label, M, diag in (("Q", Q, [c.Q_ii for c in sc.costs]), ("R", R, [c.R_ii for c in sc.costs]),
                           ("P", P, [c.P_ii for c in sc.costs])):
        sym = np.allclose(M, M.T, atol=1e-12)
        eig = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        minors = [leading_minors(M[a::2, a::2]) for a in range(2)]
        bad_blocks = [f"{label}{i + 1}{i + 1}" for i, D in enumerate(diag)
                      if np.linalg.eigvalsh(0.5 * (D + D.T)).min() <= 0]
        ok = sym and eig > 0
        if ok:
            detail = "minors per axis: " + "; ".join(", ".join(f"{m:.6g}" for m in mm) for mm in minors)
        elif bad_blocks:
            detail = f"not positive definite (min eigenvalue {eig:.4g}); offending block(s) {', '.join(bad_blocks)}"
        elif not sym:
            detail = "not symmetric"
        else:
            first_bad = [int(np.argmax(mm <= 0)) + 1 for mm in minors if np.any(mm <= 0)]
            detail = f"not positive definite (min eigenvalue {eig:.4g}); leading minor {min(first_bad or [0])} fails"
        checks.append(CheckResult(f"{label} positive definite", ok, detail))
    try:
        graph = build_coupling_graph(sc.costs, sc.constraints)
        ok = graph.is_consistent()
        detail = "; ".join(f"{i + 1}<-{{{','.join(str(j + 1) for j in graph.in_neighbors[i])}}}" for i in range(S))
    except ValueError as exc:
        ok, detail = False, str(exc)
    checks.append(CheckResult("coupling graph symmetric", ok, detail))
    cs = sc.constraints[0]
    ok = bool(np.all(cs.input_lower <= 0) and np.all(cs.input_upper >= 0))
    detail = f"input in [{cs.input_lower.tolist()}, {cs.input_upper.tolist()}]"
    if not ok:
        detail += "; zero input infeasible, robots cannot stand still"
    if cs.state_lower is not None:
        inside = np.all((sc.initial >= cs.state_lower) & (sc.initial <= cs.state_upper))
        ok = ok and bool(inside)
        if not inside:
            detail += "; initial positions outside the state box"
    checks.append(CheckResult("bounds sane", ok, detail))
    gaps = sc.schedule.gaps(sc.duration)
    checks.append(CheckResult("schedule covers run", not gaps,
                              "covers [0, %g]" % sc.duration if not gaps
                              else "gaps: " + ", ".join(f"[{a:g}, {b:g})" for a, b in gaps)))
    return checks
