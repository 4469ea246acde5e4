"""Command-line entry point: ``dmpc run``, ``dmpc validate`` and ``dmpc bench``.

Exit codes: 0 success, 1 runtime abort, 2 validation failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .messaging import DEFAULT_GROUP, DEFAULT_PORT, DEFAULT_TIMEOUT
from .scenario import ScenarioError, apply_overrides, load_scenario, validate_scenario

EXIT_OK, EXIT_ABORT, EXIT_INVALID = 0, 1, 2
OUTPUT_ENV = "DMPC_OUTPUT_DIR"

log = logging.getLogger("dmpc")


@dataclass
class RunConfig:
    scenario: str
    transport: str = "inproc"
    group: str = DEFAULT_GROUP
    base_port: int = DEFAULT_PORT
    seed: int = 0
    output: Path | None = None
    overrides: dict[str, str] = field(default_factory=dict)
    steps: int | None = None
    loss: float = 0.0
    realtime: bool = False

    def output_dir(self, scenario_name: str) -> Path:
        if self.output is not None:
            return Path(self.output)
        root = os.environ.get(OUTPUT_ENV)
        return Path(root) / scenario_name if root else Path("dmpc-out") / scenario_name


def parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ScenarioError(f"override {item!r} must look like key=value")
        out[key.strip()] = value.strip()
    return out


def _print_checks(checks) -> bool:
    ok = True
    for c in checks:
        print(f"[{'PASS' if c.ok else 'FAIL'}] {c.name}: {c.detail}")
        ok &= c.ok
    return ok


def cmd_run(cfg: RunConfig) -> int:
    from .controller import run_scenario
    from .report import format_summary, read_artifacts, summarize, write_artifacts

    try:
        sc = apply_overrides(load_scenario(cfg.scenario), cfg.overrides)
        checks = validate_scenario(sc)
    except (ScenarioError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    failed = [c for c in checks if not c.ok]
    if failed:
        _print_checks(failed)
        return EXIT_INVALID
    out = cfg.output_dir(sc.name)
    try:
        art = run_scenario(sc, transport=cfg.transport, seed=cfg.seed, steps=cfg.steps, loss_rate=cfg.loss,
                           group=cfg.group, base_port=cfg.base_port, timeout=DEFAULT_TIMEOUT,
                           realtime=cfg.realtime)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    write_artifacts(art, out)
    print(f"scenario {sc.name} ({sc.method}), {cfg.transport} transport, seed {cfg.seed}")
    print(f"artifacts in {out}")
    print(format_summary(summarize(read_artifacts(out))))
    print(f"compute time: {art.wall_seconds:.2f} s")
    if art.faults:
        print(f"solver faults (input held): {len(art.faults)}")
    if art.status != 0:
        print(f"run aborted: {art.message}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_validate(path: str) -> int:
    try:
        sc = load_scenario(path)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"scenario {sc.name}: {sc.size} robots, horizon {sc.N}, dt {sc.dt:g} s, {sc.method}")
    return EXIT_OK if _print_checks(validate_scenario(sc)) else EXIT_INVALID


def cmd_bench(args) -> int:
    from .bench import convex_suite, format_convex, format_qcqp, qcqp_suite

    if args.suite in ("convex", "all"):
        records = convex_suite(args.instances, args.seed, args.l_max, args.rho)
        print(format_convex(records))
        flagged = [r.seed for r in records if not r.oracle_converged]
        if flagged:
            print(f"oracle did not converge for seeds {flagged}")
    if args.suite in ("qcqp", "all"):
        print(format_qcqp(qcqp_suite(args.instances, args.seed, args.q_max, args.inner)))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmpc", description="Distributed MPC of robot formations.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver faults and warnings")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a scenario and write CSV artifacts")
    run.add_argument("--scenario", required=True, help="built-in scenario name or path to a TOML file")
    run.add_argument("--transport", choices=("inproc", "udp"), default="inproc")
    run.add_argument("--group", default=DEFAULT_GROUP, help="multicast group for udp transport")
    run.add_argument("--base-port", type=int, default=DEFAULT_PORT,
                     help="iterate port; measurements use the next port")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", type=Path, default=None, help=f"output directory (default ${OUTPUT_ENV}/<scenario>)")
    run.add_argument("--override", nargs="+", default=[], metavar="KEY=VALUE",
                     help="rho, l_max, q_max, hessian, stopping, duration, sigma, tau, pairs, oracle")
    run.add_argument("--steps", type=int, default=None, help="stop after this many MPC steps")
    run.add_argument("--loss", type=float, default=0.0, help="injected receive loss rate (udp only)")
    run.add_argument("--realtime", action="store_true", help="pace steps by the wall clock")

    val = sub.add_parser("validate", help="check weights, coupling graph, bounds and schedule")
    val.add_argument("scenario")

    bench = sub.add_parser("bench", help="randomized solver benchmarks")
    bench.add_argument("--suite", choices=("convex", "qcqp", "all"), default="all")
    bench.add_argument("--instances", type=int, default=100)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--l-max", type=int, default=500)
    bench.add_argument("--q-max", type=int, default=6)
    bench.add_argument("--rho", type=float, default=1.0)
    bench.add_argument("--inner", choices=("exact", "dynamic"), default="exact",
                       help="coupled QP solved centrally or by ADMM with the dynamic stopping rule")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        try:
            overrides = parse_overrides(args.override)
        except ScenarioError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        cfg = RunConfig(args.scenario, args.transport, args.group, args.base_port, args.seed, args.out,
                        overrides, args.steps, args.loss, args.realtime)
        return cmd_run(cfg)
    if args.command == "validate":
        return cmd_validate(args.scenario)
    return cmd_bench(args)


if __name__ == "__main__":
    sys.exit(main())
