"""Acceptance suite: one PASS/FAIL line per criterion.

Run under pytest (lines appear in the terminal summary) or directly with
``python3 tests/test_acceptance.py``.
"""
import sys
import time
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from _builders import PERIOD, four_rank, isolated_rank  # noqa: E402
from test_artifacts import plans  # noqa: E402
from test_cfs import scenarios  # noqa: E402

from rankaware.alloc import AllocationPlan, Mode, allocate_cpu, apportion_cells, quota_for_limit  # noqa: E402
from rankaware.artifacts import (  # noqa: E402
    DecompositionReport,
    emit_manifest,
    ingest_decomposition_report,
    plan_from_manifests,
)
from rankaware.cfs import Simulator, simulate, step_period_oracle  # noqa: E402
from rankaware.errors import ResizeConflict  # noqa: E402
from rankaware.io import BUNDLED, read_scenario, run_scenario  # noqa: E402
from rankaware.metrics import cpu_hours, freed_headroom, packing_headroom, resource_efficiency  # noqa: E402
from rankaware.scaling import PhaseSchedule, phase_allocation  # noqa: E402

RESULTS = {}
TITLES = {
    1: "allocation (1,1,5,15) over 4000m is (182,182,909,2727)",
    2: "cells (1,1,5,15) over 12225 are (556,556,2778,8335)",
    3: "16-rank grouped plan and 6544m freed headroom",
    4: "quota for 250m at 100ms is 25000us",
    5: "simulator equals step oracle on the quota x demand grid",
    6: "250m limit at 1000m demand: 75% throttled, 4x slowdown",
    7: "requests-only bundled scenarios never throttle",
    8: "synchronization amplification above 4x and 10x, monotone in K",
    9: "iteration wall = slowest rank + K x latency, randomized",
    10: "phase boundaries, no-restart resize, conflict iff request > limit",
    11: "trapezoid 140 core-s, efficiency identity/anti-symmetry, headroom conservation",
    12: "manifest and decomposition-report round trips, randomized",
}
BIG = settings(max_examples=1000, deadline=None, suppress_health_check=list(HealthCheck), derandomize=True)


def record(n, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {TITLES[n]}"
    if detail:
        line += f" ({detail})"
    RESULTS[n] = line
    print(line)


def check(n, fn):
    try:
        detail = fn() or ""
    except AssertionError as exc:
        record(n, False, str(exc).splitlines()[0] if str(exc) else "assertion failed")
        raise
    record(n, True, detail)


# -- criteria ---------------------------------------------------------------

def c1():
    plan = allocate_cpu([1, 1, 5, 15], 4000, Mode.REQUESTS_ONLY)
    assert plan.requests_millicores == (182, 182, 909, 2727), plan.requests_millicores
    assert sum(plan.requests_millicores) == 4000
    return "sum 4000m"


def c2():
    cells = apportion_cells([1, 1, 5, 15], 12225).cells_per_rank
    assert cells == (556, 556, 2778, 8335), cells
    assert sum(cells) == 12225
    return "sum 12225"


def c3():
    grouped = allocate_cpu([1, 1, 5, 15] * 4, 16000)
    reqs = grouped.requests_millicores
    assert (reqs.count(182), reqs.count(909), reqs.count(2727)) == (8, 4, 4), reqs
    assert sum(reqs) == 16000
    equal = allocate_cpu([1] * 16, 16000)
    freed = freed_headroom(equal.requests_millicores, reqs)
    assert freed == 6544, freed
    return f"freed {freed}m = {freed / 1000:.1f} vCPU"


def c4():
    q = quota_for_limit(250, 100_000).quota_usec
    assert q == 25_000, q
    return f"{q}us"


def c5():
    start = time.perf_counter()
    cases = 0
    for quota in (25_000, 50_000, 75_000, 100_000):
        for demand in range(100, 1001, 100):
            oracle = step_period_oracle(quota, PERIOD, demand, 10 * PERIOD)
            res = simulate(isolated_rank(quota, demand, int(oracle["run_usec"] * 1000) + 1)).per_rank[0]
            assert (res.nr_throttled, res.throttled_usec) == (oracle["nr_throttled"], oracle["throttled_usec"]), \
                f"quota={quota} demand={demand}"
            cases += 1
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"took {elapsed:.2f}s"
    return f"{cases} cases exact in {elapsed:.2f}s"


def c6():
    worst = 0
    for periods in (10, 20, 50, 100):
        res = simulate(isolated_rank(25_000, 1000, periods * 25_000 * 1000))
        T = res.wall_clock_usec
        dev = abs(res.per_rank[0].throttled_usec - Fraction(3, 4) * T)
        assert dev <= PERIOD, f"{periods} periods: off by {dev}us"
        free = simulate(isolated_rank(None, 1000, periods * 25_000 * 1000)).wall_clock_usec
        slow_dev = abs(T - 4 * free)
        assert slow_dev <= PERIOD, f"slowdown off by {slow_dev}us"
        worst = max(worst, dev, slow_dev)
    return f"worst deviation {float(worst):.0f}us <= one period"


def c7():
    checked = []
    for name in BUNDLED:
        sf = read_scenario(name)
        if sf.scenario.mode is not Mode.REQUESTS_ONLY:
            continue
        result, _ = run_scenario(sf)
        for i, s in enumerate(result.per_rank):
            assert s.nr_throttled == 0 and s.throttled_usec == 0, f"{name} rank {i}"
        checked.append(name)
    assert checked
    return ", ".join(checked)


def c8():
    ratios = {}
    for K in (1, 2, 4, 8, 16):
        base = simulate(four_rank(limits=[1000] * 4, weights=(1, 1, 1, 1), K=K, iterations=100))
        hard = simulate(four_rank(limits=[250, 250, 1000, 2500], K=K, iterations=100))
        ratios[K] = Fraction(hard.wall_clock_usec, base.wall_clock_usec)
    shown = " ".join(f"K={k}:{float(v):.2f}x" for k, v in ratios.items())
    for K in (8, 16):
        assert ratios[K] > 4, shown
        assert ratios[K] > 10, shown
    ks = sorted(ratios)
    assert all(ratios[a] <= ratios[b] for a, b in zip(ks, ks[1:])), shown
    return shown


def c9():
    count = {"n": 0}

    @BIG
    @given(scenarios())
    def prop(sc):
        res = simulate(sc)
        K, L = sc.comm_rounds, sc.barrier_latency_usec
        for it in range(sc.iterations):
            rounds = [r for r in res.rounds if r.iteration == it]
            assert res.per_iteration_wall_usec[it] == sum(max(r.spans) for r in rounds) + K * L
        count["n"] += 1

    prop()
    assert count["n"] >= 1000, count
    return f"{count['n']} cases"


def c10():
    p_max = AllocationPlan.explicit([1000] * 4)
    p_mid = AllocationPlan.explicit([500, 500, 1200, 1800])
    p_min = AllocationPlan.explicit([250, 250, 500, 1000])
    s = PhaseSchedule(t1=1000, t2=2000, alloc_max=p_max, alloc_mid=p_mid, alloc_min=p_min)
    assert phase_allocation(999, s) is p_max
    assert phase_allocation(1000, s) is p_mid
    assert phase_allocation(1999, s) is p_mid
    assert phase_allocation(2000, s) is p_min

    work = 10 ** 9
    sim = Simulator(isolated_rank(50_000, 1000, work))
    entry = sim.resize(0, 200_000, request_millicores=1000, limit_millicores=1000)
    res = sim.run()
    assert entry["progress_at_apply"]["chunk_remaining_millicore_usec"] == work - 10 ** 8
    assert res.per_rank[0].work_millicore_usec == work and res.iterations_completed == 1
    assert res.wall_clock_usec == 1_100_000

    mismatches = 0
    for limit in range(100, 2001, 100):
        for request in range(50, 2501, 50):
            sim = Simulator(isolated_rank(limit * PERIOD // 1000, 1000, 10 ** 6))
            try:
                sim.resize(0, 0, request_millicores=request)
                raised = False
            except ResizeConflict:
                raised = True
            mismatches += raised != (request > limit)
    assert mismatches == 0, f"{mismatches} conflict mismatches"
    return "boundaries exact, chunk progress kept, 1000 conflict cases"


def c11():
    h = cpu_hours([[(0, 1000), (35_000_000, 1000)] for _ in range(4)], 35_000_000)
    assert h == 140, h
    assert resource_efficiency(140, 140) == 1

    @settings(max_examples=300, deadline=None, derandomize=True)
    @given(st.fractions(min_value=Fraction(1, 10 ** 6), max_value=10 ** 6),
           st.fractions(min_value=Fraction(1, 10 ** 6), max_value=10 ** 6))
    def anti(a, b):
        assert resource_efficiency(a, b) * resource_efficiency(b, a) == 1

    @settings(max_examples=300, deadline=None, derandomize=True)
    @given(st.lists(st.integers(1, 64_000), min_size=1, max_size=6), st.data())
    def conserve(caps, data):
        n = data.draw(st.integers(1, 8))
        reqs = data.draw(st.lists(st.integers(1, 8000), min_size=n, max_size=n))
        where = data.draw(st.lists(st.integers(0, len(caps) - 1), min_size=n, max_size=n))
        rep = packing_headroom(caps, [(AllocationPlan.explicit(reqs), where)])
        if not rep.overcommitted:
            assert sum(reqs) + rep.total_free_millicores == sum(caps)

    anti()
    conserve()
    return "140 core-s exact"


def c12():
    counts = {"manifest": 0, "report": 0}

    @BIG
    @given(plans())
    def manifest(plan):
        assert plan_from_manifests(emit_manifest(plan, [f"p{i}" for i in range(plan.n_ranks)])) == plan
        counts["manifest"] += 1

    @BIG
    @given(st.lists(st.integers(1, 10 ** 6), min_size=1, max_size=64))
    def report(cells):
        rep = DecompositionReport(len(cells), tuple(cells))
        parsed, weights = ingest_decomposition_report(rep.to_csv())
        assert parsed == rep
        g = Fraction(cells[0]) / weights.weights[0]
        assert [w * g for w in weights.weights] == cells
        counts["report"] += 1

    manifest()
    report()
    assert min(counts.values()) >= 1000, counts
    return f"{counts['manifest']} manifests, {counts['report']} reports"


CRITERIA = {1: c1, 2: c2, 3: c3, 4: c4, 5: c5, 6: c6, 7: c7, 8: c8, 9: c9, 10: c10, 11: c11, 12: c12}


@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    check(n, CRITERIA[n])


if __name__ == "__main__":
    failed = 0
    for n in sorted(CRITERIA):
        try:
            check(n, CRITERIA[n])
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
