"""CSV artifacts of a closed-loop run and the summary computed from them.

Everything in the summary is recomputed from the three CSV files, so a
summary can be regenerated later from an output directory alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "CSV_FILES",
    "PHASES",
    "Summary",
    "format_summary",
    "read_artifacts",
    "summarize",
    "write_artifacts",
]

CSV_FILES = {"trajectory": "trajectory.csv", "residual": "residual.csv", "timing": "timing.csv"}
HEADERS = {
    "trajectory": ("t", "robot", "x", "y", "ux_applied", "uy_applied", "xbar", "ybar"),
    "residual": ("t", "residual_inf", "oracle_status"),
    "timing": ("t", "robot", "step_label", "micros"),
}
# timing labels grouped by the kind of work they measure, for both solvers
PHASES = {
    "qp_solve": ("step3_qp", "step6_qp"),
    "copy_comm": ("step4_5_comm_z", "step7_8_comm_z"),
    "average_comm": ("step6_comm_zbar", "step9_comm_zbar"),
}
WARMUP = 5.0


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "%.17g" % value
    return str(value)


def write_artifacts(art, out_dir) -> dict[str, Path]:
    """Write trajectory, residual and timing CSVs; floats keep full precision."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for kind, fname in CSV_FILES.items():
        path = out / fname
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADERS[kind])
            for row in getattr(art, kind):
                w.writerow([_fmt(v) for v in row])
        paths[kind] = path
    return paths


def read_artifacts(out_dir) -> dict[str, list[dict[str, str]]]:
    out = Path(out_dir)
    data = {}
    for kind, fname in CSV_FILES.items():
        with (out / fname).open(newline="") as fh:
            data[kind] = list(csv.DictReader(fh))
    return data


@dataclass
class PhaseStats:
    median_us: float
    max_us: float
    samples: int


@dataclass
class Summary:
    robots: int
    steps: int
    final_tracking_error: float
    max_residual_after_warmup: float
    residual_steps_used: int
    oracle_status: dict[str, int]
    min_consecutive_distance: float
    setpoint_changes: list[float]
    timing: dict[str, PhaseStats] = field(default_factory=dict)
    phases: dict[str, PhaseStats] = field(default_factory=dict)


def _stats(values) -> PhaseStats:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return PhaseStats(math.nan, math.nan, 0)
    return PhaseStats(float(np.median(v)), float(v.max()), int(v.size))


def summarize(data, warmup: float = WARMUP) -> Summary:
    """Summary numbers from CSV rows as returned by :func:`read_artifacts`."""
    traj = data["trajectory"]
    ts = sorted({float(r["t"]) for r in traj})
    robots = sorted({int(r["robot"]) for r in traj})
    S, T = len(robots), len(ts)
    pos = np.full((T, S, 2), np.nan)
    ref = np.full((T, S, 2), np.nan)
    t_index = {t: n for n, t in enumerate(ts)}
    for r in traj:
        n, i = t_index[float(r["t"])], int(r["robot"]) - 1
        pos[n, i] = float(r["x"]), float(r["y"])
        ref[n, i] = float(r["xbar"]), float(r["ybar"])

    changes = [ts[0]] if ts else []
    for n in range(1, T):
        if not np.array_equal(ref[n], ref[n - 1]):
            changes.append(ts[n])
    final_err = float(np.linalg.norm(pos[-1] - ref[-1], axis=1).max()) if T else math.nan
    if S > 1 and T:
        min_dist = float(np.linalg.norm(pos[:, 1:] - pos[:, :-1], axis=2).min())
    else:
        min_dist = math.nan

    statuses: dict[str, int] = {}
    used = []
    for r in data["residual"]:
        status = r["oracle_status"]
        statuses[status] = statuses.get(status, 0) + 1
        t = float(r["t"])
        if status != "ok" or any(c <= t < c + warmup - 1e-9 for c in changes):
            continue
        used.append(float(r["residual_inf"]))
    max_resid = max(used) if used else math.nan

    per_label: dict[str, dict[tuple[str, str], float]] = {}
    for r in data["timing"]:
        bucket = per_label.setdefault(r["step_label"], {})
        key = (r["t"], r["robot"])
        bucket[key] = bucket.get(key, 0.0) + float(r["micros"])
    timing = {label: _stats(list(b.values())) for label, b in sorted(per_label.items())}
    phases = {}
    for phase, labels in PHASES.items():
        vals = [v for label in labels for v in per_label.get(label, {}).values()]
        phases[phase] = _stats(vals)

    return Summary(S, T, final_err, max_resid, len(used), statuses, min_dist, changes, timing, phases)


def format_summary(s: Summary) -> str:
    lines = [
        f"robots: {s.robots}   steps: {s.steps}",
        f"final tracking error: {s.final_tracking_error:.3e} m",
        f"max residual after {WARMUP:g} s warm-up: {s.max_residual_after_warmup:.3e} m/s "
        f"({s.residual_steps_used} steps used)",
        "oracle status: " + ", ".join(f"{k}={v}" for k, v in sorted(s.oracle_status.items())),
        f"min consecutive-robot distance: {s.min_consecutive_distance:.4f} m",
        "timing per MPC step and robot (median / max, microseconds):",
    ]
    for label, st in s.timing.items():
        lines.append(f"  {label:<22} {st.median_us:>12.1f} {st.max_us:>12.1f}")
    lines.append("timing by phase (median / max, microseconds):")
    for phase, st in s.phases.items():
        if st.samples:
            lines.append(f"  {phase:<22} {st.median_us:>12.1f} {st.max_us:>12.1f}")
    return "\n".join(lines)
