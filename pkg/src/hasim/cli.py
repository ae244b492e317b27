"""Command line: run, validate, list-builtin, show-config, fuzz."""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from .cluster import build_config, run_scenario, show_config
from .engine import SimulationError
from .fuzz import fuzz, random_scenario_text
from .scenario import ScenarioError, list_builtin, load_scenario, resolve_builtin

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INVARIANT = 0, 1, 2, 3


def _trace_path(base: Optional[str], name: str, many: bool) -> Optional[str]:
    if base is None:
        return None
    if not many:
        return base
    p = Path(base)
    return str(p.with_name(f"{p.stem}.{name}{p.suffix}"))


def _run_one(ref: str, seed: Optional[int], trace: Optional[str], many: bool) -> dict:
    sc = load_scenario(ref)
    rep = run_scenario(sc, seed, trace_network=trace is not None)
    path = _trace_path(trace, sc.name, many)
    if path is not None:
        rep.trace.write(path)
    return {"json": rep.to_json(), "text": rep.to_text(), "violations": rep.violations,
            "verdict": rep.verdict}


def cmd_run(args) -> int:
    many = len(args.scenarios) > 1
    for ref in args.scenarios:
        load_scenario(ref)  # fail fast on parse errors
    jobs = [(ref, args.seed, args.trace, many) for ref in args.scenarios]
    if args.parallel > 1 and many:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_run_one, *zip(*jobs)))
    else:
        results = [_run_one(*job) for job in jobs]
    results.sort(key=lambda r: r["json"]["scenario"])
    if args.format == "json":
        payload = [r["json"] for r in results]
        print(json.dumps(payload[0] if len(payload) == 1 else payload, indent=2))
    else:
        print("\n\n".join(r["text"] for r in results))
    if any(r["violations"] for r in results):
        return EXIT_INVARIANT
    if any(r["verdict"] != "Matched" for r in results):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_validate(args) -> int:
    for ref in args.scenarios:
        sc = load_scenario(ref)
        cfg = build_config(sc)
        print(f"{sc.name}: ok ({len(sc.nodes)} nodes, {len(cfg.manager.resources)} resources, "
              f"{len(sc.timeline)} injections, {len(sc.expected)} expected steps)")
        for w in cfg.warnings:
            print(f"  warning: {w}")
    return EXIT_OK


def cmd_list(_args) -> int:
    for name in list_builtin():
        first = resolve_builtin(name).read_text().splitlines()[0]
        desc = first.lstrip("# ").strip() if first.startswith("#") else ""
        print(f"{name:32} {desc}")
    return EXIT_OK


def cmd_show_config(args) -> int:
    print(show_config(load_scenario(args.scenario)))
    return EXIT_OK


def cmd_fuzz(args) -> int:
    if args.show is not None:
        print(random_scenario_text(args.show), end="")
        return EXIT_OK
    summary = fuzz(range(args.start, args.start + args.runs))
    for seed, violations in sorted(summary.failures.items()):
        for v in violations:
            print(f"seed {seed}: {v}")
    print(f"{summary.runs} runs, {len(summary.failures)} with invariant violations")
    return EXIT_OK if summary.ok else EXIT_INVARIANT


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hasim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run scenarios and print reports")
    run.add_argument("scenarios", nargs="+", metavar="scenario",
                     help="scenario file or builtin name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--format", choices=("text", "json"), default="text")
    run.add_argument("--trace", metavar="PATH",
                     help="write the trace here (.jsonl for JSON lines)")
    run.add_argument("--parallel", type=int, default=1, metavar="N",
                     help="run up to N scenarios at once")
    run.set_defaults(func=cmd_run)

    val = sub.add_parser("validate", help="parse scenarios and their configs")
    val.add_argument("scenarios", nargs="+", metavar="scenario")
    val.set_defaults(func=cmd_validate)

    lst = sub.add_parser("list-builtin", help="list the shipped scenarios")
    lst.set_defaults(func=cmd_list)

    show = sub.add_parser("show-config", help="dump the effective merged configuration")
    show.add_argument("scenario")
    show.set_defaults(func=cmd_show_config)

    fz = sub.add_parser("fuzz", help="run randomized injection timelines and check invariants")
    fz.add_argument("--runs", type=int, default=100)
    fz.add_argument("--start", type=int, default=0, help="first seed")
    fz.add_argument("--show", type=int, default=None, metavar="SEED",
                    help="print the scenario generated for SEED and exit")
    fz.set_defaults(func=cmd_fuzz)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SimulationError as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
