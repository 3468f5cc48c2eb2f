import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _builders import PERIOD, four_rank, isolated_rank
from rankaware.alloc import AllocationPlan, Mode
from rankaware.cfs import Simulator, apply_resize, simulate
from rankaware.errors import ResizeConflict, ValidationError
from rankaware.scaling import (
    AtIteration,
    AtProgressFraction,
    AtTime,
    Decision,
    PatchEntry,
    PatchPlan,
    PhaseSchedule,
    ProgressSignal,
    apply_plan_in_sim,
    build_patch_plan,
    detect_transition,
    first_fire_time,
    make_trigger,
    phase_allocation,
    provisioned_core_seconds,
    run_plan,
)

P_MAX = AllocationPlan.explicit([1000] * 4)
P_MID = AllocationPlan.explicit([500, 500, 1200, 1800])
P_MIN = AllocationPlan.explicit([250, 250, 500, 1000])


def three_phase():
    return PhaseSchedule(t1=1_000_000, t2=3_000_000, alloc_max=P_MAX, alloc_mid=P_MID, alloc_min=P_MIN)


def test_phase_boundaries():
    s = three_phase()
    assert phase_allocation(0, s) is P_MAX
    assert phase_allocation(999_999, s) is P_MAX
    assert phase_allocation(1_000_000, s) is P_MID
    assert phase_allocation(2_999_999, s) is P_MID
    assert phase_allocation(3_000_000, s) is P_MIN
    assert phase_allocation(10 ** 12, s) is P_MIN


def test_schedule_validation():
    with pytest.raises(ValidationError):
        PhaseSchedule(t1=5, t2=5, alloc_max=P_MAX, alloc_mid=P_MID, alloc_min=P_MIN)
    with pytest.raises(ValidationError):
        PhaseSchedule(t1=0, alloc_max=P_MAX, alloc_mid=P_MID)
    with pytest.raises(ValidationError):
        PhaseSchedule(t1=5, alloc_max=P_MAX, alloc_mid=AllocationPlan.explicit([1000] * 3))
    with pytest.raises(ValidationError):
        PhaseSchedule(t1=5, alloc_max=P_MAX, alloc_mid=AllocationPlan.explicit([1000] * 4, [1000] * 4))
    with pytest.raises(ValidationError):
        PhaseSchedule(t1=5, t2=9, alloc_max=P_MAX, alloc_mid=P_MID)


def test_schedule_dict_roundtrip():
    s = three_phase()
    assert PhaseSchedule.from_dict(json.loads(json.dumps(s.to_dict()))) == s
    p = PhaseSchedule(t1=Fraction(344, 1000), alloc_max=P_MID, alloc_mid=P_MAX, trigger_kind="progress")
    assert PhaseSchedule.from_dict(json.loads(json.dumps(p.to_dict()))) == p


def test_two_phase_iteration_plan():
    s = PhaseSchedule(t1=100, alloc_max=P_MID, alloc_mid=P_MAX, trigger_kind="iteration")
    plan = build_patch_plan(s)
    assert len(plan) == 1
    entry = plan.entries[0]
    assert entry.trigger == AtIteration(100)
    assert entry.targets == (0, 1, 2, 3)
    assert entry.new_requests_millicores == (1000,) * 4


def test_three_phase_plan_order():
    plan = build_patch_plan(three_phase())
    assert [e.trigger for e in plan.entries] == [AtTime(1_000_000), AtTime(3_000_000)]
    assert plan.entries[1].new_requests_millicores == P_MIN.requests_millicores


def test_degenerate_schedule_is_a_noop():
    s = PhaseSchedule(t1=200_000, t2=400_000, alloc_max=P_MAX, alloc_mid=P_MAX, alloc_min=P_MAX)
    sc = four_rank(requests=[1000] * 4, weights=(1, 1, 1, 1), iterations=10, spin=False)
    res = apply_plan_in_sim(build_patch_plan(s), sc, sync_delay_usec=0)
    plain = simulate(sc)
    assert res.wall_clock_usec == plain.wall_clock_usec
    assert res.per_iteration_wall_usec == plain.per_iteration_wall_usec
    assert all(e["status"] == "applied" for e in res.resize_log)


def test_patch_plan_invariants():
    e = dict(targets=[0], new_requests_millicores=[500])
    with pytest.raises(ValidationError):
        PatchPlan((PatchEntry(AtTime(5), **e), PatchEntry(AtTime(5), **e)))
    with pytest.raises(ValidationError):
        PatchPlan((PatchEntry(AtTime(5), **e), PatchEntry(AtIteration(9), **e)))
    with pytest.raises(ValidationError):
        PatchEntry(AtTime(5), targets=[], new_requests_millicores=[])
    with pytest.raises(ValidationError):
        PatchEntry(AtTime(5), targets=[0, 1], new_requests_millicores=[5])
    with pytest.raises(ValidationError):
        make_trigger("time", -1)
    with pytest.raises(ValidationError):
        make_trigger("residual", 1)
    with pytest.raises(ValidationError):
        AtProgressFraction(Fraction(3, 2))


def test_patch_plan_exports():
    plan = build_patch_plan(three_phase())
    assert PatchPlan.from_dict(json.loads(plan.to_json())) == plan
    script = plan.render_shell([f"solver-{i}" for i in range(4)])
    lines = [ln for ln in script.splitlines() if ln.startswith("kubectl")]
    assert len(lines) == 8
    assert all("--subresource resize --type=json" in ln for ln in lines)
    body = json.loads(lines[3].split(" -p ", 1)[1].strip("'"))
    assert body == [{"op": "replace", "path": "/spec/containers/0/resources/requests/cpu", "value": "1800m"}]
    hard = build_patch_plan(PhaseSchedule(t1=5, alloc_max=AllocationPlan.explicit([500], [500]),
                                          alloc_mid=AllocationPlan.explicit([800], [900])))
    assert "limits/cpu" in hard.render_shell(["p"])


# -- progress detection -----------------------------------------------------

def linear_trace(run_usec, steps=1000):
    return [(run_usec * k // steps, Fraction(k, steps)) for k in range(steps + 1)]


def test_detect_fresh_signal_fires_at_threshold():
    sig = ProgressSignal("log-line", 0)
    assert detect_transition(sig, Fraction(344, 1000), Fraction(344, 1000), 0) is Decision.FIRE
    assert detect_transition(sig, Fraction(343, 1000), Fraction(344, 1000), 0) is Decision.HOLD
    R = 80_000_000
    assert first_fire_time(sig, linear_trace(R), Fraction(344, 1000)) == R * 344 // 1000


def test_detect_stale_signal_fires_late():
    R = 80_000_000
    sig = ProgressSignal("time-directory-listing", R * 6 // 10)
    trace = linear_trace(R)
    fire = first_fire_time(sig, trace, Fraction(344, 1000))
    # hand walk: crossing at 0.344R, seen 0.6R later
    assert fire == R * 344 // 1000 + R * 6 // 10
    assert fire > R * 9 // 10
    assert detect_transition(sig, trace, Fraction(344, 1000), fire - 1) is Decision.HOLD
    assert detect_transition(sig, trace, Fraction(344, 1000), fire) is Decision.FIRE


def test_detect_zero_threshold_fires_immediately():
    sig = ProgressSignal("iteration-counter", 10 ** 9)
    assert detect_transition(sig, [(0, 0)], 0, 0) is Decision.FIRE
    assert first_fire_time(sig, [(0, 0)], 0) == 0


def test_detect_validation():
    with pytest.raises(ValidationError):
        ProgressSignal("log-line", -1)
    with pytest.raises(ValidationError):
        detect_transition(ProgressSignal(), 0.5, 1.5, 0)


# -- resizes inside the simulator -------------------------------------------

def test_resize_preserves_in_flight_chunk():
    work = 1_000_000 * 1000
    sim = Simulator(isolated_rank(50_000, 1000, work))
    entry = sim.resize(0, 200_000, request_millicores=1000, limit_millicores=1000)
    res = sim.run()
    assert entry["status"] == "applied" and entry["applied_at_usec"] == 200_000
    # two half-core periods done: 0.1 s of CPU, 0.9 s left at full speed
    assert entry["progress_at_apply"]["chunk_remaining_millicore_usec"] == work - 2 * 50_000 * 1000
    assert entry["progress_at_apply"]["iteration"] == 0
    assert res.wall_clock_usec == 200_000 + 900_000
    assert res.per_rank[0].work_millicore_usec == work
    assert res.per_rank[0].nr_throttled == 2


def test_resize_waits_for_period_boundary():
    sim = Simulator(isolated_rank(50_000, 1000, 10 ** 9))
    entry = sim.resize(0, 150_001, request_millicores=800, limit_millicores=800)
    sim.run()
    assert entry["applied_at_usec"] == 200_000


def test_resize_conflict_under_hard_limits():
    sim = Simulator(isolated_rank(100_000, 1000, 10 ** 6))
    with pytest.raises(ResizeConflict) as info:
        sim.resize(0, 0, request_millicores=1200)
    assert info.value.rank_id == 0 and info.value.limit_millicores == 1000
    assert sim.resize_log[-1]["status"] == "conflict"
    sim.resize(0, 0, request_millicores=1000)
    sim.resize(0, 0, request_millicores=1200, limit_millicores=1500)


def test_resize_requests_only_never_conflicts():
    sim = Simulator(isolated_rank(None, 1000, 10 ** 6))
    for req in (1, 500, 5000, 10 ** 6):
        sim.resize(0, 0, request_millicores=req)
    with pytest.raises(ValidationError):
        sim.resize(0, 0, request_millicores=500, limit_millicores=500)


def test_resize_rejects_past_and_unknown():
    sim = Simulator(isolated_rank(None, 1000, 10 ** 6))
    with pytest.raises(ValidationError):
        sim.resize(3, 0, request_millicores=10)
    sim.run()
    with pytest.raises(ValidationError):
        sim.resize(0, 0, request_millicores=10)


def test_functional_apply_resize():
    sim = Simulator(isolated_rank(25_000, 1000, 10 ** 8))
    entry = apply_resize(sim, 0, effective_time_usec=100_000, request_millicores=1000, limit_millicores=1000)
    sim.run()
    assert entry["status"] == "applied"


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 4000), st.integers(1, 4000), st.booleans())
def test_conflict_iff_request_exceeds_limit(current_limit, request, pass_limit):
    sim = Simulator(isolated_rank(current_limit * PERIOD // 1000, 1000, 10 ** 6))
    new_limit = request + 7 if pass_limit else None
    limit_in_force = new_limit if pass_limit else current_limit
    try:
        sim.resize(0, 0, request_millicores=request, limit_millicores=new_limit)
        conflicted = False
    except ResizeConflict:
        conflicted = True
    assert conflicted == (request > limit_in_force)


# -- plans replayed in the simulator ----------------------------------------

def c5_like(mode=Mode.REQUESTS_ONLY, iterations=60):
    if mode is Mode.REQUESTS_ONLY:
        return four_rank(requests=[500, 500, 1200, 1800], iterations=iterations)
    return four_rank(limits=[500, 500, 1200, 1800], iterations=iterations)


def test_requests_only_plan_completes_continuously():
    sc = c5_like()
    plan = PatchPlan((PatchEntry(AtIteration(20), range(4), [1000] * 4),))
    out = run_plan(plan, sc, sync_delay_usec=50_000)
    res = out.result
    assert res.iterations_completed == sc.iterations
    assert len(res.per_iteration_wall_usec) == sc.iterations
    assert out.conflicts == []
    assert all(e["status"] == "applied" for e in res.resize_log)
    fired = out.fired_at_usec[0]
    assert fired == sum(res.per_iteration_wall_usec[:20])
    for e in res.resize_log:
        assert 0 <= e["applied_at_usec"] - (fired + 50_000) < PERIOD
        assert e["progress_at_apply"]["iteration"] >= 20
    for prof, s in zip(sc.ranks, res.per_rank):
        assert s.work_millicore_usec == prof.work_per_iteration * sc.iterations
        assert s.nr_throttled == 0


def test_hard_limit_plan_records_conflicts_and_patches_the_rest():
    sc = c5_like(Mode.HARD_LIMITS, iterations=30)
    plan = PatchPlan((PatchEntry(AtIteration(10), range(4), [1000] * 4),))
    out = run_plan(plan, sc, sync_delay_usec=0)
    assert sorted(c.rank_id for c in out.conflicts) == [0, 1]
    status = {e["rank"]: e["status"] for e in out.result.resize_log}
    assert status == {0: "conflict", 1: "conflict", 2: "applied", 3: "applied"}
    assert out.result.iterations_completed == 30
    with pytest.raises(ResizeConflict):
        apply_plan_in_sim(plan, sc, sync_delay_usec=0, strict=True)


def test_empty_plan_matches_plain_run():
    sc = c5_like(iterations=10)
    a = apply_plan_in_sim(PatchPlan(()), sc)
    b = simulate(sc)
    assert a.wall_clock_usec == b.wall_clock_usec
    assert [vars(x) for x in a.per_rank] == [vars(x) for x in b.per_rank]


def test_progress_trigger_maps_to_iteration():
    sc = c5_like(iterations=50)
    plan = PatchPlan((PatchEntry(AtProgressFraction(Fraction(344, 1000)), range(4), [1000] * 4),))
    out = run_plan(plan, sc, sync_delay_usec=0)
    assert out.fired_at_usec == [sum(out.result.per_iteration_wall_usec[:18])]  # ceil(0.344 * 50)
    stale = run_plan(plan, sc, sync_delay_usec=0, signal=ProgressSignal("time-directory-listing", 30_000))
    assert stale.fired_at_usec == [out.fired_at_usec[0] + 30_000]


def test_time_trigger_and_schedule_in_simulate():
    sc = c5_like(iterations=30)
    sched = PhaseSchedule(t1=150_000, alloc_max=P_MID, alloc_mid=P_MAX)
    res = simulate(type(sc)(**{**vars(sc), "phase_schedule": sched}))
    assert {e["applied_at_usec"] for e in res.resize_log} == {200_000}
    assert res.iterations_completed == 30


def test_plan_targets_must_exist():
    with pytest.raises(ValidationError):
        run_plan(PatchPlan((PatchEntry(AtTime(5), [9], [100]),)), c5_like(iterations=2))


def test_provisioned_core_seconds():
    s = three_phase()
    # 1 s at 4000m, 2 s at 4000m, then 2 s at 2000m
    assert provisioned_core_seconds(s, 5_000_000) == 4 + 8 + 4
    assert provisioned_core_seconds(s, 500_000) == 2
    assert provisioned_core_seconds(s, 5_000_000) < 4 * 5


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10 ** 6), st.integers(1, 10 ** 6), st.integers(1, 3 * 10 ** 6),
       st.lists(st.integers(1, 2000), min_size=3, max_size=3))
def test_provisioning_sums_phases(t1, gap, duration, totals):
    plans = [AllocationPlan.explicit([v]) for v in totals]
    s = PhaseSchedule(t1=t1, t2=t1 + gap, alloc_max=plans[0], alloc_mid=plans[1], alloc_min=plans[2])
    edges = [0, t1, t1 + gap, max(duration, t1 + gap)]
    expected = sum(max(0, min(edges[i + 1], duration) - min(edges[i], duration)) * totals[i] for i in range(3))
    got = provisioned_core_seconds(s, duration)
    assert got == Fraction(expected, 10 ** 9)
    if totals[0] > max(totals[1:]) and duration > t1:
        assert got < Fraction(totals[0] * duration, 10 ** 9)
