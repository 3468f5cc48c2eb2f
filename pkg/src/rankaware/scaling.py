"""Phase-based CPU schedules and in-place resize plans.

A :class:`PhaseSchedule` holds up to three allocation plans (start-up,
development, steady state) switched at two boundaries. :func:`build_patch_plan`
turns it into a :class:`PatchPlan`, which can be replayed inside the simulator
(:func:`apply_plan_in_sim`) or exported as JSON or as a shell script of
``kubectl patch --subresource resize`` calls.
"""
from __future__ import annotations

import enum
import json
import math
import shlex
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence, Union

from .alloc import MILLICORES_PER_CORE, AllocationPlan, Mode, to_fraction
from .cfs import SimResult, SimScenario, Simulator
from .errors import ResizeConflict, ValidationError

DEFAULT_SYNC_DELAY_USEC = 5_000_000


@dataclass(frozen=True, order=True)
class AtTime:
    usec: int
    kind = "time"

    @property
    def value(self):
        return self.usec


@dataclass(frozen=True, order=True)
class AtIteration:
    n: int
    kind = "iteration"

    @property
    def value(self):
        return self.n


@dataclass(frozen=True, order=True)
class AtProgressFraction:
    f: Fraction
    kind = "progress"

    def __post_init__(self):
        object.__setattr__(self, "f", to_fraction(self.f))
        if not 0 <= self.f <= 1:
            raise ValidationError("progress fraction must lie in [0, 1]")

    @property
    def value(self):
        return self.f


Trigger = Union[AtTime, AtIteration, AtProgressFraction]
_TRIGGERS = {"time": AtTime, "iteration": AtIteration, "progress": AtProgressFraction}


def make_trigger(kind: str, value) -> Trigger:
    try:
        cls = _TRIGGERS[kind]
    except KeyError:
        raise ValidationError(f"unknown trigger kind {kind!r}") from None
    if cls is AtProgressFraction:
        return cls(value)
    if int(value) != value or value < 0:
        raise ValidationError(f"{kind} trigger needs a non-negative integer, got {value!r}")
    return cls(int(value))


def _trigger_to_dict(trig: Trigger) -> dict:
    value = trig.value
    return {"kind": trig.kind, "value": str(value) if isinstance(value, Fraction) else value}


def _trigger_from_dict(d: dict) -> Trigger:
    return make_trigger(d["kind"], to_fraction(d["value"]) if d["kind"] == "progress" else d["value"])


@dataclass(frozen=True)
class PhaseSchedule:
    """Allocation switched at two boundaries: ``max`` before ``t1``, ``mid`` on
    ``[t1, t2)``, ``min`` from ``t2`` on.

    Boundaries are measured in ``trigger_kind`` units (virtual microseconds by
    default). Leaving ``t2`` as ``None`` gives a two-phase schedule.
    """

    t1: Union[int, Fraction]
    alloc_max: AllocationPlan
    alloc_mid: AllocationPlan
    t2: Optional[Union[int, Fraction]] = None
    alloc_min: Optional[AllocationPlan] = None
    trigger_kind: str = "time"

    def __post_init__(self):
        if self.trigger_kind not in _TRIGGERS:
            raise ValidationError(f"unknown trigger kind {self.trigger_kind!r}")
        if self.trigger_kind == "progress":
            object.__setattr__(self, "t1", to_fraction(self.t1))
            if self.t2 is not None:
                object.__setattr__(self, "t2", to_fraction(self.t2))
        if self.alloc_min is None:
            if self.t2 is not None:
                raise ValidationError("t2 given without alloc_min")
            object.__setattr__(self, "alloc_min", self.alloc_mid)
        if self.t1 <= 0:
            raise ValidationError("t1 must be positive")
        if self.t2 is not None and not self.t1 < self.t2:
            raise ValidationError("t1 must come before t2")
        plans = (self.alloc_max, self.alloc_mid, self.alloc_min)
        if len({p.n_ranks for p in plans}) != 1:
            raise ValidationError("all phase plans must cover the same ranks")
        if len({p.mode for p in plans}) != 1:
            raise ValidationError("all phase plans must use the same allocation mode")

    @property
    def t1_usec(self):
        return self.t1

    @property
    def t2_usec(self):
        return self.t2

    def to_dict(self) -> dict:
        def enc(v):
            return str(v) if isinstance(v, Fraction) else v

        return {
            "trigger_kind": self.trigger_kind,
            "t1": enc(self.t1),
            "t2": enc(self.t2),
            "alloc_max": self.alloc_max.to_dict(),
            "alloc_mid": self.alloc_mid.to_dict(),
            "alloc_min": None if self.t2 is None else self.alloc_min.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseSchedule":
        kind = d.get("trigger_kind", "time")
        conv = to_fraction if kind == "progress" else int
        t2 = d.get("t2")
        return cls(
            t1=conv(d["t1"]),
            t2=None if t2 is None else conv(t2),
            alloc_max=AllocationPlan.from_dict(d["alloc_max"]),
            alloc_mid=AllocationPlan.from_dict(d["alloc_mid"]),
            alloc_min=None if d.get("alloc_min") is None else AllocationPlan.from_dict(d["alloc_min"]),
            trigger_kind=kind,
        )


def phase_allocation(t, schedule: PhaseSchedule) -> AllocationPlan:
    """Plan in force at position ``t`` (half-open phases, right-continuous at boundaries)."""
    if t < schedule.t1:
        return schedule.alloc_max
    if schedule.t2 is None or t < schedule.t2:
        return schedule.alloc_mid
    return schedule.alloc_min


def provisioned_core_seconds(schedule: PhaseSchedule, duration_usec: int) -> Fraction:
    """Requested CPU integrated over ``[0, duration)`` for a time-based schedule."""
    if schedule.trigger_kind != "time":
        raise ValidationError("provisioning integral needs a time-based schedule")
    edges = [0, schedule.t1] + ([] if schedule.t2 is None else [schedule.t2]) + [None]
    plans = [schedule.alloc_max, schedule.alloc_mid, schedule.alloc_min]
    total = 0
    for i in range(len(edges) - 1):
        lo = min(edges[i], duration_usec)
        hi = duration_usec if edges[i + 1] is None else min(edges[i + 1], duration_usec)
        total += (hi - lo) * sum(plans[i].requests_millicores)
    return Fraction(total, MILLICORES_PER_CORE * 1_000_000)


@dataclass(frozen=True)
class PatchEntry:
    trigger: Trigger
    targets: tuple
    new_requests_millicores: tuple
    new_limits_millicores: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(int(t) for t in self.targets))
        object.__setattr__(self, "new_requests_millicores", tuple(int(r) for r in self.new_requests_millicores))
        if self.new_limits_millicores is not None:
            object.__setattr__(self, "new_limits_millicores", tuple(int(v) for v in self.new_limits_millicores))
        if not self.targets:
            raise ValidationError("patch entry needs at least one target")
        if len(self.new_requests_millicores) != len(self.targets):
            raise ValidationError("one new request per target")
        if self.new_limits_millicores is not None and len(self.new_limits_millicores) != len(self.targets):
            raise ValidationError("one new limit per target")
        if any(r <= 0 for r in self.new_requests_millicores):
            raise ValidationError("requests must be positive")


@dataclass(frozen=True)
class PatchPlan:
    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if len({e.trigger.kind for e in self.entries}) > 1:
            raise ValidationError("all entries of a plan must use the same trigger kind")
        values = [e.trigger.value for e in self.entries]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ValidationError("patch triggers must be strictly increasing")

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "trigger": _trigger_to_dict(e.trigger),
                    "targets": list(e.targets),
                    "new_requests_millicores": list(e.new_requests_millicores),
                    "new_limits_millicores": None if e.new_limits_millicores is None
                    else list(e.new_limits_millicores),
                }
                for e in self.entries
            ]
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchPlan":
        return cls(tuple(
            PatchEntry(
                trigger=_trigger_from_dict(e["trigger"]),
                targets=e["targets"],
                new_requests_millicores=e["new_requests_millicores"],
                new_limits_millicores=e.get("new_limits_millicores"),
            )
            for e in d.get("entries", [])
        ))

    def render_shell(self, pod_names: Sequence[str], container_index: int = 0) -> str:
        """Operator commands for the plan, one ``kubectl patch`` per target.

        Triggers appear as comments; waiting for them is left to the operator.
        """
        lines = [
            "#!/bin/sh",
            "# In-place CPU resize plan (generated; review before running).",
            "set -e",
        ]
        base = f"/spec/containers/{container_index}/resources"
        for n, entry in enumerate(self.entries, 1):
            lines.append("")
            lines.append(f"# entry {n}: at {entry.trigger.kind} {entry.trigger.value}")
            for j, rank in enumerate(entry.targets):
                if rank >= len(pod_names):
                    raise ValidationError(f"no pod name for rank {rank}")
                ops = [{"op": "replace", "path": f"{base}/requests/cpu",
                        "value": f"{entry.new_requests_millicores[j]}m"}]
                if entry.new_limits_millicores is not None:
                    ops.append({"op": "replace", "path": f"{base}/limits/cpu",
                                "value": f"{entry.new_limits_millicores[j]}m"})
                body = json.dumps(ops, separators=(",", ":"))
                lines.append(
                    f"kubectl patch pod {shlex.quote(pod_names[rank])} --subresource resize "
                    f"--type=json -p {shlex.quote(body)}"
                )
        return "\n".join(lines) + "\n"


def _entry_for(trigger: Trigger, plan: AllocationPlan) -> PatchEntry:
    limits = plan.limits_millicores if plan.mode is Mode.HARD_LIMITS else None
    return PatchEntry(
        trigger=trigger,
        targets=tuple(range(plan.n_ranks)),
        new_requests_millicores=plan.requests_millicores,
        new_limits_millicores=limits,
    )


def build_patch_plan(schedule: PhaseSchedule) -> PatchPlan:
    """One entry per phase boundary, each patching every rank at once."""
    entries = [_entry_for(make_trigger(schedule.trigger_kind, schedule.t1), schedule.alloc_mid)]
    if schedule.t2 is not None:
        entries.append(_entry_for(make_trigger(schedule.trigger_kind, schedule.t2), schedule.alloc_min))
    return PatchPlan(tuple(entries))


class SignalSource(str, enum.Enum):
    ITERATION_COUNTER = "iteration-counter"
    TIME_DIRECTORY_LISTING = "time-directory-listing"
    LOG_LINE = "log-line"


@dataclass(frozen=True)
class ProgressSignal:
    """Where the monitor reads progress from and how stale that view can be."""

    source: SignalSource = SignalSource.LOG_LINE
    staleness_usec: int = 0

    def __post_init__(self):
        object.__setattr__(self, "source", SignalSource(self.source))
        if self.staleness_usec < 0:
            raise ValidationError("staleness cannot be negative")


class Decision(str, enum.Enum):
    FIRE = "fire"
    HOLD = "hold"


def visible_progress(signal: ProgressSignal, trace, now_usec: int) -> Fraction:
    """Progress the monitor can see at ``now_usec``: the newest trace point at least
    ``staleness_usec`` old. ``trace`` is a time-ordered ``(time_usec, fraction)`` list."""
    cutoff = now_usec - signal.staleness_usec
    seen = Fraction(0)
    for t, f in trace:
        if t > cutoff:
            break
        seen = to_fraction(f)
    return seen


def detect_transition(signal: ProgressSignal, observed_progress, threshold, now_usec: int) -> Decision:
    """Fire once the (possibly stale) progress reaches ``threshold``.

    ``observed_progress`` is either a progress trace, delayed by the signal's
    staleness, or a single already-observed fraction.
    """
    threshold = to_fraction(threshold)
    if not 0 <= threshold <= 1:
        raise ValidationError("threshold must lie in [0, 1]")
    if isinstance(observed_progress, (list, tuple)):
        seen = visible_progress(signal, observed_progress, now_usec)
    else:
        seen = to_fraction(observed_progress)
        if not 0 <= seen <= 1:
            raise ValidationError("progress must lie in [0, 1]")
    return Decision.FIRE if seen >= threshold else Decision.HOLD


def first_fire_time(signal: ProgressSignal, trace, threshold) -> Optional[int]:
    """Earliest time at which :func:`detect_transition` fires for ``trace``, if ever."""
    threshold = to_fraction(threshold)
    if threshold == 0:
        return 0
    for t, f in trace:
        if to_fraction(f) >= threshold:
            return t + signal.staleness_usec
    return None


@dataclass
class PlanRun:
    """Result of :func:`apply_plan_in_sim` plus what happened to each patch."""

    result: SimResult
    conflicts: list = field(default_factory=list)
    fired_at_usec: list = field(default_factory=list)


def apply_plan_in_sim(plan: PatchPlan, scenario: SimScenario,
                      sync_delay_usec: int = DEFAULT_SYNC_DELAY_USEC,
                      signal: Optional[ProgressSignal] = None, strict: bool = False) -> SimResult:
    """Simulate ``scenario`` while replaying ``plan`` as in-place resizes.

    A fired entry patches its targets at ``fire time + sync_delay`` (rounded up to
    the next CFS period boundary). Progress-based triggers see the run through
    ``signal`` and so fire ``staleness_usec`` late. Under hard limits a target whose
    request would exceed its limit is rejected with :class:`ResizeConflict`; the
    other targets are still patched and the run continues, with the conflict
    recorded in ``result.resize_log``. Pass ``strict=True`` to raise instead.
    The scenario's own ``phase_schedule`` is ignored here.
    """
    return run_plan(plan, scenario, sync_delay_usec, signal, strict).result


def run_plan(plan: PatchPlan, scenario: SimScenario, sync_delay_usec: int = DEFAULT_SYNC_DELAY_USEC,
             signal: Optional[ProgressSignal] = None, strict: bool = False) -> PlanRun:
    if sync_delay_usec < 0:
        raise ValidationError("sync delay cannot be negative")
    signal = signal or ProgressSignal()
    for entry in plan.entries:
        for rank in entry.targets:
            if not 0 <= rank < len(scenario.ranks):
                raise ValidationError(f"plan targets unknown rank {rank}")

    sim = Simulator(replace(scenario, phase_schedule=None))
    outcome = PlanRun(result=None)

    def fire(entry):
        def _do(s: Simulator):
            outcome.fired_at_usec.append(s.t)
            for j, rank in enumerate(entry.targets):
                limit = None if entry.new_limits_millicores is None else entry.new_limits_millicores[j]
                try:
                    s.resize(rank, s.t + sync_delay_usec,
                             request_millicores=entry.new_requests_millicores[j],
                             limit_millicores=limit, patched_at_usec=s.t)
                except ResizeConflict as exc:
                    if strict:
                        raise
                    outcome.conflicts.append(exc)
        return _do

    total = scenario.iterations
    for entry in plan.entries:
        trig = entry.trigger
        if isinstance(trig, AtTime):
            sim.call_at(trig.usec, fire(entry))
            continue
        # done / total >= f  <=>  done >= ceil(f * total)
        needed = trig.n if isinstance(trig, AtIteration) else math.ceil(trig.f * total)
        if needed == 0:
            sim.call_at(signal.staleness_usec, fire(entry))
        else:
            _watch(sim, needed, signal.staleness_usec, fire(entry))

    outcome.result = sim.run()
    return outcome


def _watch(sim: Simulator, needed: int, staleness: int, callback):
    def hook(s, done, t):
        if done == needed:
            s.call_at(t + staleness, callback)

    sim.on_iteration(hook)
