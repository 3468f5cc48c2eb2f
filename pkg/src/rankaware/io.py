"""Scenario files in, result files out.

A scenario file is a JSON object; the recognised keys are documented in the
README. Results are written as JSON plus two CSV files:
``timeline.csv`` (``time_usec,rank,millicores``) and ``throttle.csv``
(``rank,nr_throttled,throttled_usec,fraction``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional

from .alloc import (
    DEFAULT_PERIOD_USEC,
    AllocationPlan,
    CgroupParams,
    Mode,
    allocate_cpu,
    apportion_cells,
    cgroup_params,
    to_fraction,
)
from .cfs import (
    DEFAULT_COMM_ROUNDS,
    DEFAULT_SAMPLE_INTERVAL_USEC,
    NodeSpec,
    RankProfile,
    SimResult,
    SimScenario,
)
from .errors import ValidationError
from .scaling import (
    DEFAULT_SYNC_DELAY_USEC,
    PatchPlan,
    PhaseSchedule,
    PlanRun,
    ProgressSignal,
    build_patch_plan,
    run_plan,
)

BUNDLED = ("c2_equal", "c3_hard_limits", "c4_requests_only", "c5_dynamic",
           "sixteen_rank_grouped", "sixteen_rank_equal")


@dataclass
class ScenarioFile:
    name: str
    scenario: SimScenario
    plan: AllocationPlan
    patch_plan: Optional[PatchPlan] = None
    sync_delay_usec: int = DEFAULT_SYNC_DELAY_USEC
    signal: Optional[ProgressSignal] = None
    raw: Optional[dict] = None


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ValidationError(f"{where}: missing required key {key!r}")
    return d[key]


def _plan_from_section(section: dict, mode: Mode) -> AllocationPlan:
    if "weights" in section:
        return allocate_cpu(section["weights"], int(_require(section, "budget_millicores", "allocation")), mode)
    requests = [int(r) for r in _require(section, "requests_millicores", "allocation")]
    limits = section.get("limits_millicores")
    if mode is Mode.HARD_LIMITS and limits is None:
        limits = requests
    if mode is Mode.REQUESTS_ONLY and limits is not None:
        raise ValidationError("allocation: requests-only scenarios cannot set limits")
    return AllocationPlan.explicit(requests, limits, mode)


def _cells_from_section(section: dict, n: int) -> list[int]:
    if "cells" in section:
        cells = [int(c) for c in section["cells"]]
    else:
        weights = _require(section, "weights", "decomposition")
        cells = list(apportion_cells(weights, int(_require(section, "total_cells", "decomposition"))).cells_per_rank)
    if len(cells) != n:
        raise ValidationError(f"decomposition gives {len(cells)} subdomains for {n} ranks")
    return cells


def load_scenario(data: dict, **overrides) -> ScenarioFile:
    """Build a runnable scenario from its JSON object.

    ``overrides`` replace scalar top-level keys (iterations, comm_rounds_per_iter, ...).
    """
    data = dict(data)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(data.get(key), (list, dict)):
            raise ValidationError(f"cannot override list/object key {key!r} from the command line")
        data[key] = value

    name = data.get("name", "scenario")
    mode = Mode.parse(_require(data, "mode", name))
    period = int(data.get("period_usec", DEFAULT_PERIOD_USEC))
    schedule = None
    if data.get("phase_schedule") is not None:
        schedule = PhaseSchedule.from_dict(data["phase_schedule"])

    if "allocation" in data:
        plan = _plan_from_section(data["allocation"], mode)
    elif schedule is not None:
        plan = schedule.alloc_max
    else:
        raise ValidationError(f"{name}: needs an allocation or a phase_schedule")
    if plan.mode is not mode:
        raise ValidationError(f"{name}: allocation mode {plan.mode.value} differs from scenario mode")
    if schedule is not None and schedule.alloc_max != plan:
        raise ValidationError(f"{name}: phase_schedule must start from the scenario allocation")

    n = plan.n_ranks
    cells = _cells_from_section(_require(data, "decomposition", name), n)
    cost = to_fraction(data.get("cost_per_cell_usec", 1))
    K = int(data.get("comm_rounds_per_iter", DEFAULT_COMM_ROUNDS))
    demand = data.get("demand_millicores", 1000)
    demands = list(demand) if isinstance(demand, list) else [int(demand)] * n
    if len(demands) != n:
        raise ValidationError(f"{name}: one demand per rank expected")

    node_specs = data.get("nodes") or [{"capacity_millicores": 1000 * n, "ranks": list(range(n))}]
    nodes = []
    node_of = {}
    for idx, nd in enumerate(node_specs):
        members = [int(r) for r in _require(nd, "ranks", f"{name} node {idx}")]
        for r in members:
            node_of[r] = idx
        nodes.append(NodeSpec(int(_require(nd, "capacity_millicores", f"{name} node {idx}")), members,
                              int(nd.get("background_load_millicores", 0))))
    groups = cgroup_params(plan, period)
    ranks = []
    for i in range(n):
        if i not in node_of:
            raise ValidationError(f"{name}: rank {i} is not placed on any node")
        ranks.append(RankProfile(
            cells=cells[i],
            cost_per_cell_usec=cost,
            node_id=node_of[i],
            cgroup=groups[i],
            comm_rounds_per_iter=K,
            demand_millicores=int(demands[i]),
            request_millicores=plan.requests_millicores[i],
        ))
    scenario = SimScenario(
        ranks=ranks,
        nodes=nodes,
        iterations=int(_require(data, "iterations", name)),
        mode=mode,
        phase_schedule=schedule,
        barrier_latency_usec=int(data.get("barrier_latency_usec", 0)),
        sample_interval_usec=int(data.get("sample_interval_usec", DEFAULT_SAMPLE_INTERVAL_USEC)),
        spin_wait=bool(data.get("spin_wait", False)),
        name=name,
    )
    patch_plan = None
    if data.get("patch_plan") is not None:
        patch_plan = PatchPlan.from_dict(data["patch_plan"])
    signal = None
    if data.get("progress_signal") is not None:
        sig = data["progress_signal"]
        signal = ProgressSignal(sig.get("source", "log-line"), int(sig.get("staleness_usec", 0)))
    return ScenarioFile(
        name=name,
        scenario=scenario,
        plan=plan,
        patch_plan=patch_plan,
        sync_delay_usec=int(data.get("sync_delay_usec", DEFAULT_SYNC_DELAY_USEC)),
        signal=signal,
        raw=data,
    )


def read_scenario(path_or_name, **overrides) -> ScenarioFile:
    """Load a scenario from a path, or one of the bundled scenarios by name."""
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    elif str(path_or_name) in BUNDLED:
        text = resources.files("rankaware").joinpath("scenarios", f"{path_or_name}.json").read_text()
    else:
        raise ValidationError(f"no scenario file or bundled scenario named {path_or_name!r}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path_or_name}: invalid JSON ({exc})") from None
    return load_scenario(data, **overrides)


def run_scenario(sf: ScenarioFile) -> tuple[SimResult, Optional[PlanRun]]:
    """Simulate, replaying the phase schedule and/or patch plan if present."""
    scenario = sf.scenario
    entries = []
    if scenario.phase_schedule is not None:
        entries.extend(build_patch_plan(scenario.phase_schedule).entries)
    if sf.patch_plan is not None:
        entries.extend(sf.patch_plan.entries)
    if not entries:
        from .cfs import Simulator

        return Simulator(scenario).run(), None
    outcome = run_plan(PatchPlan(tuple(entries)), scenario, sf.sync_delay_usec, sf.signal)
    return outcome.result, outcome


def _num(v):
    if isinstance(v, Fraction):
        return int(v) if v.denominator == 1 else str(v)
    return v


def result_to_dict(result: SimResult, sf: Optional[ScenarioFile] = None,
                   outcome: Optional[PlanRun] = None) -> dict:
    scenario = result.scenario
    out = {
        "name": sf.name if sf else (scenario.name if scenario else ""),
        "mode": scenario.mode.value if scenario else None,
        "iterations": scenario.iterations if scenario else None,
        "iterations_completed": result.iterations_completed,
        "comm_rounds_per_iter": scenario.comm_rounds if scenario else None,
        "wall_clock_usec": result.wall_clock_usec,
        "per_iteration_wall_usec": list(result.per_iteration_wall_usec),
        "total_work_millicore_usec": scenario.total_work() if scenario else None,
        "per_rank": [],
    }
    for i, st in enumerate(result.per_rank):
        out["per_rank"].append({
            "rank": i,
            "nr_throttled": st.nr_throttled,
            "throttled_usec": st.throttled_usec,
            "throttled_fraction": _num(result.throttled_fraction(i)),
            "cpu_millicore_usec": st.cpu_millicore_usec,
            "work_millicore_usec": st.work_millicore_usec,
            "spin_millicore_usec": st.spin_millicore_usec,
            "cpu_usage_series": [[t, m] for t, m in st.cpu_usage_series],
        })
    if scenario is not None:
        out["requests_millicores"] = [r.request_millicores for r in scenario.ranks]
        limits = [r.limit_millicores for r in scenario.ranks]
        out["limits_millicores"] = None if all(v is None for v in limits) else [_num(v) for v in limits]
        out["nodes"] = [
            {"capacity_millicores": n.capacity_millicores, "resident_rank_ids": list(n.resident_rank_ids),
             "background_load_millicores": n.background_load_millicores}
            for n in scenario.nodes
        ]
    out["resize_log"] = [dict(e) for e in result.resize_log]
    if outcome is not None:
        out["resize_triggers_fired_usec"] = list(outcome.fired_at_usec)
        out["resize_conflicts"] = [
            {"rank": c.rank_id, "request_millicores": c.request_millicores,
             "limit_millicores": _num(c.limit_millicores)}
            for c in outcome.conflicts
        ]
    return out


def timeline_csv(result: SimResult) -> str:
    lines = ["time_usec,rank,millicores"]
    for i, st in enumerate(result.per_rank):
        lines.extend(f"{t},{i},{m}" for t, m in st.cpu_usage_series)
    return "\n".join(lines) + "\n"


def throttle_csv(result: SimResult) -> str:
    lines = ["rank,nr_throttled,throttled_usec,fraction"]
    for i, st in enumerate(result.per_rank):
        frac = result.throttled_fraction(i)
        lines.append(f"{i},{st.nr_throttled},{st.throttled_usec},{float(frac):.6f}")
    return "\n".join(lines) + "\n"


def write_result(out_dir, result: SimResult, sf: Optional[ScenarioFile] = None,
                 outcome: Optional[PlanRun] = None) -> dict:
    """Write ``result.json``, ``timeline.csv`` and ``throttle.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = result_to_dict(result, sf, outcome)
    (out_dir / "result.json").write_text(json.dumps(doc, indent=2) + "\n")
    (out_dir / "timeline.csv").write_text(timeline_csv(result))
    (out_dir / "throttle.csv").write_text(throttle_csv(result))
    return doc


def read_result(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "result.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read result {path}: {exc}") from None
    for key in ("wall_clock_usec", "per_rank", "requests_millicores"):
        if key not in doc:
            raise ValidationError(f"{path}: not a simulation result (missing {key!r})")
    return doc
