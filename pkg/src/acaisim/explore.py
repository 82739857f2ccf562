"""Bounded exhaustive exploration and seeded fuzzing over the action alphabet."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field
from typing import Optional, TextIO

from .adversary import AdversaryAction, Bounds, action_alphabet, base_system
from .errors import AcaiError, BudgetExceeded
from .invariants import InvariantChecker, InvariantReport, Violation, check_audit, check_state
from .script import EXIT_OK, EXIT_VIOLATION, TraceEvent


@dataclass(frozen=True)
class Counterexample:
    trace: tuple[str, ...]
    violation: Violation

    def __str__(self):
        return f"{' -> '.join(self.trace) or '<base>'}: {self.violation}"


@dataclass
class ExploreResult:
    depth: int
    violations: list[Counterexample] = field(default_factory=list)
    states: int = 0
    transitions: int = 0
    per_level: list[int] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations


def explore(depth: int, bounds: Bounds = Bounds(), *, max_states: Optional[int] = None,
            stop_at_first: bool = False,
            alphabet: Optional[list[AdversaryAction]] = None) -> ExploreResult:
    """Breadth-first search over every action sequence of length <= ``depth``.

    States are deduplicated on their canonical form. Trace-level checks run on
    every transition, snapshot checks on every newly reached state. A state
    that violates something is reported (with the shortest path that reached
    it) and not expanded further.
    """
    start = time.perf_counter()
    actions = action_alphabet(bounds) if alphabet is None else alphabet
    base = base_system(bounds)
    base.record_calls = False
    steps = [(action, *action.unpacked()) for action in actions]
    result = ExploreResult(depth)
    found: dict[tuple, Counterexample] = {}

    report = InvariantChecker().check(base, 0)
    for v in report.violations:
        found[(v.check, v.witness)] = Counterexample((), v)
    base_key = base.state_key()
    seen = {base_key}
    frontier = [(base, (), base_key)] if report.ok else []
    result.per_level.append(1)

    for level in range(1, depth + 1):
        nxt = []
        for state, path, origin in frontier:
            gen = state.memory.generation
            s = state.clone()
            result.transitions += len(steps)
            for action, guard, run, params in steps:
                if guard is not None and guard(state, *params):
                    continue
                try:
                    run(s, *params)
                except AcaiError:
                    pass
                rep = InvariantReport(level)
                check_audit(s, s.drain_audit(), rep, gen)
                key = s.state_key()
                if key == origin and rep.ok:
                    continue        # refused without side effects; reuse the copy
                fresh = key not in seen
                if fresh:
                    seen.add(key)
                    check_state(s, rep)
                    if max_states is not None and len(seen) > max_states:
                        raise BudgetExceeded(f"more than {max_states} states at depth {level}")
                if rep.violations:
                    trace = path + (action.label,)
                    for v in rep.violations:
                        found.setdefault((v.check, v.witness), Counterexample(trace, v))
                    if stop_at_first:
                        result.violations = list(found.values())
                        result.states = len(seen)
                        result.seconds = time.perf_counter() - start
                        return result
                elif fresh and level < depth:
                    nxt.append((s, path + (action.label,), key))
                s = state.clone()
        result.per_level.append(len(nxt) if level < depth else len(seen) - sum(result.per_level))
        frontier = nxt

    result.violations = list(found.values())
    result.states = len(seen)
    result.seconds = time.perf_counter() - start
    return result


@dataclass
class FuzzResult:
    exit_code: int
    events: list[TraceEvent]
    violations: list[Violation]
    steps: int


def fuzz(seed: int, steps: int, bounds: Bounds = Bounds(), *, sink: Optional[TextIO] = None,
         record: bool = True) -> FuzzResult:
    """Seeded random walk over the alphabet with invariant checks after every step.

    Stops at the first violation (exit 2). The trace is one event per step.
    """
    rng = random.Random(seed)
    actions = action_alphabet(bounds)
    system = base_system(bounds)
    system.record_calls = False
    checker = InvariantChecker()
    checker.check(system, 0)
    events: list[TraceEvent] = []
    for step in range(1, steps + 1):
        action = actions[rng.randrange(len(actions))]
        try:
            action.apply(system)
            outcome = "ok"
        except AcaiError as exc:
            outcome = exc.name
        report = checker.check(system, step)
        event = TraceEvent(step, action.actor.value, action.op, action.args(), outcome,
                           system.digest())
        if record:
            events.append(event)
        if sink is not None:
            sink.write(event.to_json() + "\n")
        if not report.ok:
            return FuzzResult(EXIT_VIOLATION, events, report.violations, step)
    return FuzzResult(EXIT_OK, events, [], steps)


def replay_actions(labels, bounds: Bounds = Bounds(), *,
                   sink: Optional[TextIO] = None) -> tuple[list[TraceEvent], InvariantReport]:
    """Re-run an action sequence from the base state, one trace event per action."""
    by_label = {a.label: a for a in action_alphabet(bounds)}
    system = base_system(bounds)
    system.record_calls = False
    checker = InvariantChecker()
    report = checker.check(system, 0)
    events = []
    for step, label in enumerate(labels, 1):
        action = by_label[label]
        try:
            action.apply(system)
            outcome = "ok"
        except AcaiError as exc:
            outcome = exc.name
        report = checker.check(system, step)
        event = TraceEvent(step, action.actor.value, action.op, action.args(), outcome,
                           system.digest())
        events.append(event)
        if sink is not None:
            sink.write(event.to_json() + "\n")
    return events, report
