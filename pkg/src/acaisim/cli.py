"""Command-line front end: run scripts, explore, fuzz, list attack scenarios."""

from __future__ import annotations

import argparse
import contextlib
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .adversary import SCENARIOS, Bounds, run_attack_scenario
from .errors import BudgetExceeded
from .explore import explore, fuzz, replay_actions
from .script import EXIT_OK, EXIT_PARSE, EXIT_VIOLATION, run_script


class _Parser(argparse.ArgumentParser):
    def error(self, message):           # usage errors are parse errors, not violations
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="acaisim", description=__doc__)
    parser.add_argument("--opt", action="store_true", help="pre-map realm memory at creation")
    parser.add_argument("--trace", metavar="PATH", help="write JSON Lines trace here")
    # the same flags are accepted after the subcommand; SUPPRESS keeps the global value
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--opt", action="store_true", default=argparse.SUPPRESS)
    shared.add_argument("--trace", metavar="PATH", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", parents=[shared], help="execute a scenario script")
    run.add_argument("script", type=Path)

    exp = sub.add_parser("explore", parents=[shared], help="bounded exhaustive exploration")
    exp.add_argument("--depth", type=int, required=True)
    exp.add_argument("--config", type=Path, help="key=value bounds file")
    exp.add_argument("--max-states", type=int, default=None)

    fz = sub.add_parser("fuzz", parents=[shared],
                        help="seeded random walk over the action alphabet")
    fz.add_argument("--seed", type=int, required=True)
    fz.add_argument("--steps", type=int, required=True)
    fz.add_argument("--config", type=Path, help="key=value bounds file")

    sc = sub.add_parser("scenarios", parents=[shared], help="list attack scenarios")
    sc.add_argument("--run", action="store_true", help="run every scenario and report")
    return parser


@contextlib.contextmanager
def _sink(path: Optional[str], default):
    if path is None:
        yield default
    else:
        with open(path, "w") as fh:
            yield fh


def _bounds(args) -> Bounds:
    text = args.config.read_text() if args.config else ""
    bounds = Bounds.parse(text)
    return replace(bounds, opt=True) if args.opt else bounds


def _cmd_run(args) -> int:
    if not args.script.is_file():
        print(f"acaisim: no such script: {args.script}", file=sys.stderr)
        return EXIT_PARSE
    with _sink(args.trace, sys.stdout) as sink:
        result = run_script(args.script, opt=args.opt, sink=sink)
    if result.message:
        print(result.message, file=sys.stderr)
    return result.exit_code


def _cmd_explore(args) -> int:
    bounds = _bounds(args)
    try:
        result = explore(args.depth, bounds, max_states=args.max_states)
    except BudgetExceeded as exc:
        print(f"acaisim: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"depth {result.depth}: {result.states} states, {result.transitions} transitions, "
          f"{len(result.violations)} violations in {result.seconds:.1f}s")
    print("states per level: " + " ".join(str(n) for n in result.per_level))
    ordered = sorted(result.violations, key=lambda c: c.trace)
    for cex in ordered:
        print(f"VIOLATION {cex}")
    if args.trace and ordered:
        with open(args.trace, "w") as fh:
            for cex in ordered:
                replay_actions(cex.trace, bounds, sink=fh)
    return EXIT_VIOLATION if ordered else EXIT_OK


def _cmd_fuzz(args) -> int:
    bounds = _bounds(args)
    with _sink(args.trace, None) as sink:
        result = fuzz(args.seed, args.steps, bounds, sink=sink, record=False)
    for v in result.violations:
        print(f"VIOLATION at step {result.steps}: {v}")
    if not result.violations:
        print(f"seed {args.seed}: {result.steps} steps, no violations")
    return result.exit_code


def _cmd_scenarios(args) -> int:
    if not args.run:
        for name, sc in SCENARIOS.items():
            print(f"{name:28} {sc.threat.value:26} {sc.blocked_by}")
        return EXIT_OK
    failed = 0
    for name in SCENARIOS:
        outcome = run_attack_scenario(name, opt=args.opt)
        status = "blocked" if outcome.blocked else "NOT BLOCKED"
        print(f"{name:28} {status:11} {outcome.blocked_by} at step {outcome.at_step}")
        failed += not outcome.blocked
    return EXIT_OK if not failed else EXIT_VIOLATION


_COMMANDS = {"run": _cmd_run, "explore": _cmd_explore, "fuzz": _cmd_fuzz,
             "scenarios": _cmd_scenarios}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"acaisim: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
