"""Command-line entry point.

Exit codes: 0 success, 2 validation failure, 3 runtime divergence, 4 acceptance failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import re
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from dooc.acceptance import plan, reproduce
from dooc.cost import build_cost, global_minimizer
from dooc.errors import DOOCError, GainValidationError, InternalModelError, NotApplicableError
from dooc.graph import Digraph, is_weight_balanced, laplacian, left_eigenvector
from dooc.models import Scenario, load_scenario
from dooc.regulator import RegulatorSpec
from dooc.sim import ClosedLoop, run, run_many, write_outputs

logger = logging.getLogger(__name__)

DEFAULT_SCENARIO = "paper_sec4.json"


def _dump(payload: Any) -> None:
    print(json.dumps(payload, indent=2))


def _load(args: argparse.Namespace) -> Scenario:
    return load_scenario(args.scenario, overrides=args.set, seed=args.seed)


# ── Commands ──────────────────────────────────────────────────


def cmd_validate(args: argparse.Namespace) -> int:
    """Load and compile the scenario; never integrates."""
    scn = _load(args)
    try:
        loop = ClosedLoop.compile(scn)
    except GainValidationError as e:
        print(e.report.summary())
        raise
    print(loop.report.summary() or "no agent gains to check")
    for agent in loop.agents:
        reg = agent.regulator
        print(
            f"agent{agent.index}: family {agent.plant.family}, Sylvester residual "
            f"{reg.residual:.3g}, cond(T) {reg.cond:.3g}"
        )
    print(f"{scn.name}: valid")
    return 0


def oracle_report(scn: Scenario) -> dict[str, Any]:
    """Oracle quantities computed without touching the simulator."""
    digraph = Digraph.from_edges(
        scn.n, [(e.source - 1, e.target - 1, e.weight) for e in scn.graph.edges]
    )
    lap = laplacian(digraph)
    r = left_eigenvector(lap)
    costs = [build_cost(c.kind, c.q, c.b) for c in scn.costs]
    regulators = []
    for i, pc in enumerate(scn.plants, start=1):
        rc = scn.regulators[i - 1] if scn.regulators is not None else None
        try:
            reg = RegulatorSpec.for_family(
                pc.family,
                scn.exosystem.theta,
                m=None if rc is None or rc.M is None else np.asarray(rc.M, dtype=float),
                n=None if rc is None or rc.N is None else np.asarray(rc.N, dtype=float),
                ell=None if rc is None else rc.ell,
            )
        except (NotApplicableError, InternalModelError) as e:
            regulators.append({"agent": i, "family": pc.family, "error": str(e)})
            continue
        eig = np.linalg.eigvals(reg.Phi)
        regulators.append(
            {
                "agent": i,
                "family": pc.family,
                "sylvester_residual": reg.residual,
                "T_cond": reg.cond,
                "phi_spectrum": [[float(z.real), float(z.imag)] for z in eig],
            }
        )
    return {
        "s_star": global_minimizer(costs),
        "r": r.tolist(),
        "weight_balanced": is_weight_balanced(lap),
        "regulators": regulators,
    }


def cmd_oracle(args: argparse.Namespace) -> int:
    _dump(oracle_report(_load(args)))
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    scn = _load(args)
    if args.dry_run:
        _dump(scn.dump())
        return 0
    traj = run(scn)
    report = write_outputs(traj, args.out)
    logger.info("Wrote trajectory and metadata to %s", args.out)
    _dump(report.model_dump(mode="json"))
    return 0


def cmd_reproduce_paper(args: argparse.Namespace) -> int:
    scn = _load(args)
    if args.dry_run:
        _dump({role: s.dump() for role, s in plan(scn).items()})
        return 0
    bundle = reproduce(scn, args.out, jobs=args.jobs)
    print(bundle.report.table())
    bundle.report.raise_if_failed()
    return 0


def _parse_vary(items: Sequence[str]) -> list[tuple[str, list[str]]]:
    axes = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not key or not values:
            raise DOOCError(f"--vary must look like key=v1,v2,..., got {item!r}", exit_code=2)
        axes.append((key, values.split(",")))
    return axes


def _slug(assignments: Sequence[str]) -> str:
    return re.sub(r"[^A-Za-z0-9=._-]+", "_", "__".join(assignments)) or "base"


def cmd_sweep(args: argparse.Namespace) -> int:
    """Cartesian product of ``--vary`` axes, one output subdirectory per combination."""
    base = _load(args)
    axes = _parse_vary(args.vary)
    combos = [
        [f"{key}={value}" for (key, _), value in zip(axes, values)]
        for values in itertools.product(*(vals for _, vals in axes))
    ]
    scenarios = [
        base.with_overrides(combo + [f"name={json.dumps(f'{base.name}:{_slug(combo)}')}"])
        for combo in combos
    ]
    if args.dry_run:
        _dump({_slug(c): s.dump() for c, s in zip(combos, scenarios)})
        return 0

    results = run_many(scenarios, jobs=args.jobs, capture_errors=True)
    summary, diverged = {}, False
    for combo, result in zip(combos, results):
        slug = _slug(combo)
        if isinstance(result, DOOCError):
            logger.error("%s failed: %s", slug, result)
            summary[slug] = {"error": str(result), "exit_code": result.exit_code}
            diverged = True
            continue
        report = write_outputs(result, Path(args.out) / slug)
        summary[slug] = {"final_error": report.final_error, "sup_u": report.sup_u}
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "sweep.json").write_text(json.dumps(summary, indent=2) + "\n")
    _dump(summary)
    return 3 if diverged else 0


# ── Parser ────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--scenario",
        default=DEFAULT_SCENARIO,
        help="Scenario JSON file, or the name of a shipped scenario",
    )
    common.add_argument("--out", default="out", help="Output directory")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a scenario value by dotted key (repeatable)",
    )
    common.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    common.add_argument("--dry-run", action="store_true", help="Print resolved scenarios only")
    common.add_argument("--jobs", type=int, default=1, help="Worker processes for batches")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="dooc",
        description="Distributed optimal output consensus simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="Integrate a scenario").set_defaults(
        func=cmd_run
    )
    sub.add_parser(
        "validate", parents=[common], help="Validate a scenario without integrating"
    ).set_defaults(func=cmd_validate)
    sub.add_parser(
        "oracle", parents=[common], help="Print s*, r, Sylvester residuals and Φ spectra"
    ).set_defaults(func=cmd_oracle)
    sub.add_parser(
        "reproduce-paper",
        parents=[common],
        help="Run the five-agent example and check every acceptance criterion",
    ).set_defaults(func=cmd_reproduce_paper)
    sweep = sub.add_parser("sweep", parents=[common], help="Run a parameter sweep")
    sweep.add_argument(
        "--vary",
        action="append",
        required=True,
        metavar="KEY=V1,V2",
        help="Swept dotted key and its values (repeatable; cartesian product)",
    )
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except DOOCError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
