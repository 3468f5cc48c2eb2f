"""Run-level efficiency metrics and cluster headroom.

CPU usage is integrated with the trapezoidal rule in exact arithmetic; the
internal unit is core-seconds. Usage timelines are read from CSV with the
header ``time_usec,rank,millicores``.
"""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .alloc import MILLICORES_PER_CORE, AllocationPlan, to_fraction
from .errors import EmptySeries, MalformedReport, ValidationError

USEC_PER_SEC = 1_000_000
_MCUS_PER_CORE_SEC = MILLICORES_PER_CORE * USEC_PER_SEC


@dataclass(frozen=True)
class UsageSeries:
    samples: tuple

    def __init__(self, samples: Iterable):
        pts = tuple((int(t), to_fraction(m)) for t, m in samples)
        for (a, _), (b, _) in zip(pts, pts[1:]):
            if b <= a:
                raise ValidationError("usage timestamps must be strictly increasing")
        object.__setattr__(self, "samples", pts)

    def __len__(self):
        return len(self.samples)


def integrate_series(series: UsageSeries, t_end_usec: int) -> Fraction:
    """Millicore-microseconds under one series, trapezoidal between samples and
    held flat from the last sample to ``t_end_usec``."""
    pts = series.samples
    if not pts:
        raise EmptySeries("usage series has no samples")
    if pts[-1][0] > t_end_usec:
        raise ValidationError(f"sample at {pts[-1][0]}us lies past the end time {t_end_usec}us")
    area = Fraction(0)
    for (t0, u0), (t1, u1) in zip(pts, pts[1:]):
        area += (u0 + u1) * (t1 - t0) / 2
    area += pts[-1][1] * (t_end_usec - pts[-1][0])
    return area


def cpu_hours(series: Sequence, T_usec: int) -> Fraction:
    """Total CPU consumed over ``[0, T]`` in core-seconds (named after the usual metric)."""
    if not series:
        raise EmptySeries("no usage series given")
    total = Fraction(0)
    for s in series:
        if not isinstance(s, UsageSeries):
            s = UsageSeries(s)
        total += integrate_series(s, T_usec)
    return total / _MCUS_PER_CORE_SEC


def resource_efficiency(h_baseline, h_config) -> Fraction:
    """``H_baseline / H_config``; above 1 means the config used less CPU."""
    h_baseline = to_fraction(h_baseline)
    h_config = to_fraction(h_config)
    if h_config <= 0 or h_baseline <= 0:
        raise ValidationError("CPU totals must be positive to compare efficiency")
    return h_baseline / h_config


def speedup_and_parallel_efficiency(t_serial_usec, t_config_usec, total_alloc_millicores):
    t_serial_usec = to_fraction(t_serial_usec)
    t_config_usec = to_fraction(t_config_usec)
    total_alloc_millicores = to_fraction(total_alloc_millicores)
    if min(t_serial_usec, t_config_usec, total_alloc_millicores) <= 0:
        raise ValidationError("times and allocation must be positive")
    speedup = t_serial_usec / t_config_usec
    return speedup, speedup * MILLICORES_PER_CORE / total_alloc_millicores


def relative_change(baseline, config) -> Fraction:
    """Signed change of ``config`` against ``baseline`` (-0.2 means 20% lower)."""
    baseline = to_fraction(baseline)
    if baseline == 0:
        raise ValidationError("baseline must be non-zero")
    return (to_fraction(config) - baseline) / baseline


@dataclass
class HeadroomReport:
    per_node: list
    total_free_millicores: int
    overcommitted: list

    @property
    def free_per_node(self) -> list:
        return [n["free_millicores"] for n in self.per_node]


def _capacity(node) -> int:
    cap = getattr(node, "capacity_millicores", node)
    return int(cap)


def packing_headroom(nodes: Sequence, placements: Sequence) -> HeadroomReport:
    """Free requestable CPU per node after placing every rank of every plan.

    ``nodes`` are :class:`~rankaware.cfs.NodeSpec` objects or plain capacities.
    ``placements`` pairs each :class:`AllocationPlan` with the node index of each
    of its ranks. A node whose requests exceed its capacity is flagged, not
    rejected.
    """
    requested = [0] * len(nodes)
    for plan, assignment in placements:
        if len(assignment) != plan.n_ranks:
            raise ValidationError("placement must name a node for every rank")
        for req, node in zip(plan.requests_millicores, assignment):
            if not 0 <= node < len(nodes):
                raise ValidationError(f"placement references unknown node {node}")
            requested[node] += req
    per_node = []
    over = []
    for i, node in enumerate(nodes):
        cap = _capacity(node)
        free = cap - requested[i]
        if free < 0:
            over.append(i)
        per_node.append({"node": i, "capacity_millicores": cap, "requested_millicores": requested[i],
                         "free_millicores": free, "overcommitted": free < 0})
    return HeadroomReport(per_node=per_node, total_free_millicores=sum(n["free_millicores"] for n in per_node),
                          overcommitted=over)


def freed_headroom(baseline_requests: Sequence[int], requests: Sequence[int],
                   ranks: Optional[Iterable[int]] = None) -> int:
    """Millicores released against a baseline allocation.

    By default only the sparse-subdomain ranks count: those provisioned at the
    plan's smallest request. Pass ``ranks`` to choose the set explicitly.
    """
    if len(baseline_requests) != len(requests):
        raise ValidationError("baseline and plan must cover the same ranks")
    if ranks is None:
        floor = min(requests)
        ranks = [i for i, r in enumerate(requests) if r == floor and r < baseline_requests[i]]
    return sum(baseline_requests[i] - requests[i] for i in ranks)


def total_reduction(baseline_requests: Sequence[int], requests: Sequence[int]) -> int:
    """Sum of every per-rank cut below the baseline."""
    return sum(max(0, b - r) for b, r in zip(baseline_requests, requests))


@dataclass
class MetricsReport:
    name: str
    wall_clock_usec: int
    cpu_seconds_total: Fraction
    efficiency: Fraction
    speedup: Fraction
    parallel_efficiency: Fraction
    n_effective_millicores: int
    n_effective_consumed_millicores: int
    parallel_efficiency_consumed: Fraction
    slowdown_vs_baseline: Fraction
    headroom_millicores_per_node: list = field(default_factory=list)
    freed_vs_baseline_millicores: Optional[int] = None
    throttled_ranks: int = 0

    @property
    def cpu_hours_total(self) -> Fraction:
        return self.cpu_seconds_total / 3600

    def to_dict(self) -> dict:
        def num(v):
            return float(v) if isinstance(v, Fraction) else v

        return {
            "name": self.name,
            "wall_clock_usec": self.wall_clock_usec,
            "wall_clock_s": num(Fraction(self.wall_clock_usec, USEC_PER_SEC)),
            "cpu_seconds_total": num(self.cpu_seconds_total),
            "cpu_hours_total": num(self.cpu_hours_total),
            "efficiency": num(self.efficiency),
            "speedup": num(self.speedup),
            "parallel_efficiency": num(self.parallel_efficiency),
            "n_effective_millicores": self.n_effective_millicores,
            "n_effective_consumed_millicores": self.n_effective_consumed_millicores,
            "parallel_efficiency_consumed": num(self.parallel_efficiency_consumed),
            "slowdown_vs_baseline": num(self.slowdown_vs_baseline),
            "headroom_millicores_per_node": list(self.headroom_millicores_per_node),
            "freed_vs_baseline_millicores": self.freed_vs_baseline_millicores,
            "throttled_ranks": self.throttled_ranks,
        }


def build_report(run: dict, baseline: dict, t_serial_usec=None) -> MetricsReport:
    """Compare one run summary against a baseline summary.

    Both are dictionaries as produced by :func:`rankaware.io.result_to_dict`.
    Without an explicit serial time, the serial reference is the run's total
    useful work executed on one core.
    """
    T = run["wall_clock_usec"]
    h = cpu_hours([UsageSeries(r["cpu_usage_series"]) for r in run["per_rank"]], T)
    h_base = cpu_hours([UsageSeries(r["cpu_usage_series"]) for r in baseline["per_rank"]],
                       baseline["wall_clock_usec"])
    if t_serial_usec is None:
        t_serial_usec = Fraction(run["total_work_millicore_usec"], MILLICORES_PER_CORE)
    requests = run["requests_millicores"]
    n_eff = sum(requests)
    speedup, par_eff = speedup_and_parallel_efficiency(t_serial_usec, T, n_eff)
    consumed = round(h * _MCUS_PER_CORE_SEC / T) if T else 0
    par_eff_consumed = speedup * MILLICORES_PER_CORE / consumed if consumed else Fraction(0)

    headroom = []
    if run.get("nodes"):
        plan = AllocationPlan.explicit(requests)
        assignment = [0] * len(requests)
        for n, node in enumerate(run["nodes"]):
            for r in node["resident_rank_ids"]:
                assignment[r] = n
        rep = packing_headroom([n["capacity_millicores"] for n in run["nodes"]], [(plan, assignment)])
        headroom = rep.free_per_node
    freed = None
    base_requests = baseline.get("requests_millicores")
    if base_requests is not None and len(base_requests) == len(requests):
        freed = freed_headroom(base_requests, requests)

    return MetricsReport(
        name=run.get("name", ""),
        wall_clock_usec=T,
        cpu_seconds_total=h,
        efficiency=resource_efficiency(h_base, h),
        speedup=speedup,
        parallel_efficiency=par_eff,
        n_effective_millicores=n_eff,
        n_effective_consumed_millicores=consumed,
        parallel_efficiency_consumed=par_eff_consumed,
        slowdown_vs_baseline=Fraction(T, baseline["wall_clock_usec"]),
        headroom_millicores_per_node=headroom,
        freed_vs_baseline_millicores=freed,
        throttled_ranks=sum(1 for r in run["per_rank"] if r["nr_throttled"]),
    )


def format_comparison(reports: Sequence[MetricsReport]) -> str:
    header = ["config", "T[s]", "slowdown", "H[core-s]", "eta", "S", "E(req)", "E(used)",
              "N_eff[m]", "headroom[m]", "freed[m]", "throttled"]
    rows = []
    for r in reports:
        rows.append([
            r.name,
            f"{float(Fraction(r.wall_clock_usec, USEC_PER_SEC)):.3f}",
            f"{float(r.slowdown_vs_baseline):.2f}x",
            f"{float(r.cpu_seconds_total):.3f}",
            f"{float(r.efficiency):.3f}",
            f"{float(r.speedup):.3f}",
            f"{float(r.parallel_efficiency):.3f}",
            f"{float(r.parallel_efficiency_consumed):.3f}",
            str(r.n_effective_millicores),
            str(sum(r.headroom_millicores_per_node)) if r.headroom_millicores_per_node else "-",
            "-" if r.freed_vs_baseline_millicores is None else str(r.freed_vs_baseline_millicores),
            str(r.throttled_ranks),
        ])
    widths = [max(len(x[c]) for x in [header] + rows) for c in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
           "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip() for row in rows]
    return "\n".join(out)


def read_usage_csv(text: str) -> dict:
    """Parse ``time_usec,rank,millicores`` rows into one :class:`UsageSeries` per rank."""
    reader = csv.reader(io.StringIO(text))
    points = defaultdict(list)
    for lineno, row in enumerate(reader, 1):
        if not row or not "".join(row).strip():
            continue
        if lineno == 1 and row[0].strip() == "time_usec":
            continue
        if len(row) != 3:
            raise MalformedReport(f"line {lineno}: expected time_usec,rank,millicores")
        try:
            t, rank, m = int(row[0]), int(row[1]), to_fraction(row[2].strip())
        except (ValueError, ValidationError):
            raise MalformedReport(f"line {lineno}: non-numeric field") from None
        points[rank].append((t, m))
    return {rank: UsageSeries(sorted(pts)) for rank, pts in sorted(points.items())}
