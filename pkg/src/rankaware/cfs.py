"""Discrete-event model of barrier-synchronised MPI ranks under CFS bandwidth control.

Each rank is a single-threaded process. An iteration is split into ``K``
compute chunks, each followed by a collective barrier. A rank's CPU rate is
its weighted max-min fair share of its node (capped by its own demand, at most
one core). Under hard limits every rank also carries a CFS quota per period;
once the quota is spent the rank is throttled until the next period boundary,
and any barrier it has not reached yet waits with it.

All bookkeeping is integral: time in microseconds, CPU in millicore-microseconds
(1000 of them make one CPU-microsecond). Identical scenarios give identical
results.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

from .alloc import (
    DEFAULT_PERIOD_USEC,
    MILLICORES_PER_CORE,
    CgroupParams,
    Mode,
    apportion_exact,
    to_fraction,
)
from .errors import ResizeConflict, UnschedulableScenario, ValidationError

SINGLE_THREAD_CAP = 1000
DEFAULT_SAMPLE_INTERVAL_USEC = 5_000_000
DEFAULT_COMM_ROUNDS = 4


@dataclass(frozen=True)
class RankProfile:
    cells: int
    cost_per_cell_usec: Fraction
    node_id: int
    cgroup: CgroupParams
    comm_rounds_per_iter: int = DEFAULT_COMM_ROUNDS
    demand_millicores: int = SINGLE_THREAD_CAP
    request_millicores: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "cost_per_cell_usec", to_fraction(self.cost_per_cell_usec))
        if self.cells < 1:
            raise ValidationError("a rank needs at least one cell")
        if self.cost_per_cell_usec <= 0:
            raise ValidationError("cost_per_cell_usec must be positive")
        if self.comm_rounds_per_iter < 1:
            raise ValidationError("comm_rounds_per_iter must be >= 1")
        if not 0 < self.demand_millicores <= SINGLE_THREAD_CAP:
            raise ValidationError("demand_millicores must lie in (0, 1000]")
        if self.request_millicores is None:
            object.__setattr__(self, "request_millicores", self.cgroup.cpu_weight)

    @property
    def work_per_iteration(self) -> int:
        """Millicore-microseconds of compute per iteration (1 CPU-ns resolution)."""
        exact = self.cells * self.cost_per_cell_usec * MILLICORES_PER_CORE
        return math.floor(exact + Fraction(1, 2))

    @property
    def limit_millicores(self) -> Optional[Fraction]:
        return self.cgroup.limit_millicores


@dataclass(frozen=True)
class NodeSpec:
    capacity_millicores: int
    resident_rank_ids: tuple
    background_load_millicores: int = 0

    def __post_init__(self):
        object.__setattr__(self, "resident_rank_ids", tuple(self.resident_rank_ids))
        if self.capacity_millicores <= 0:
            raise ValidationError("node capacity must be positive")
        if self.background_load_millicores < 0:
            raise ValidationError("background load cannot be negative")

    @property
    def available_millicores(self) -> int:
        return self.capacity_millicores - self.background_load_millicores


@dataclass(frozen=True)
class SimScenario:
    ranks: tuple
    nodes: tuple
    iterations: int
    mode: Mode
    phase_schedule: object = None
    barrier_latency_usec: int = 0
    sample_interval_usec: int = DEFAULT_SAMPLE_INTERVAL_USEC
    spin_wait: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(self.ranks))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if not self.ranks:
            raise ValidationError("scenario has no ranks")
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if self.barrier_latency_usec < 0:
            raise ValidationError("barrier latency cannot be negative")
        if self.sample_interval_usec <= 0:
            raise ValidationError("sample interval must be positive")

        seen = {}
        for n, node in enumerate(self.nodes):
            for r in node.resident_rank_ids:
                if not 0 <= r < len(self.ranks):
                    raise ValidationError(f"node {n} lists unknown rank {r}")
                if r in seen:
                    raise ValidationError(f"rank {r} is placed on nodes {seen[r]} and {n}")
                seen[r] = n
        for i, rank in enumerate(self.ranks):
            if i not in seen:
                raise ValidationError(f"rank {i} is not placed on any node")
            if rank.node_id != seen[i]:
                raise ValidationError(f"rank {i} says node {rank.node_id} but node {seen[i]} hosts it")
            if self.mode is Mode.HARD_LIMITS and rank.cgroup.unlimited:
                raise ValidationError(f"rank {i} has no quota in hard-limits mode")
            if self.mode is Mode.REQUESTS_ONLY and not rank.cgroup.unlimited:
                raise ValidationError(f"rank {i} has a quota in requests-only mode")
        if len({r.comm_rounds_per_iter for r in self.ranks}) != 1:
            raise ValidationError("all ranks must share the same number of barriers per iteration")

    @property
    def comm_rounds(self) -> int:
        return self.ranks[0].comm_rounds_per_iter

    def total_work(self) -> int:
        """Useful millicore-microseconds summed over ranks and iterations."""
        return sum(r.work_per_iteration for r in self.ranks) * self.iterations


@dataclass
class RankStats:
    nr_throttled: int = 0
    throttled_usec: int = 0
    cpu_usage_series: list = field(default_factory=list)
    cpu_millicore_usec: int = 0
    work_millicore_usec: int = 0
    spin_millicore_usec: int = 0

    @property
    def cpu_usec(self) -> Fraction:
        return Fraction(self.cpu_millicore_usec, MILLICORES_PER_CORE)


@dataclass
class RoundRecord:
    iteration: int
    round: int
    start_usec: int
    arrival_usec: tuple
    release_usec: int

    @property
    def spans(self) -> tuple:
        return tuple(a - self.start_usec for a in self.arrival_usec)


@dataclass
class SimResult:
    wall_clock_usec: int
    per_rank: list
    per_iteration_wall_usec: list
    iterations_completed: int
    rounds: list = field(default_factory=list)
    resize_log: list = field(default_factory=list)
    scenario: Optional[SimScenario] = None

    def throttled_fraction(self, rank: int) -> Fraction:
        if self.wall_clock_usec == 0:
            return Fraction(0)
        return Fraction(self.per_rank[rank].throttled_usec, self.wall_clock_usec)

    @property
    def any_throttled(self) -> bool:
        return any(s.nr_throttled for s in self.per_rank)


def fair_share(node, runnable: Sequence, cap_millicores_per_rank: int = SINGLE_THREAD_CAP) -> list:
    """Weighted max-min fair split of a node's spare capacity.

    ``node`` is a :class:`NodeSpec` or a plain capacity in millicores.
    ``runnable`` holds ``(rank_id, weight)`` or ``(rank_id, weight, cap)``
    entries. Returns ``(rank_id, millicores)`` in input order; integral shares
    are rounded by largest remainder so the total never exceeds capacity.
    """
    if isinstance(node, NodeSpec):
        available = node.available_millicores
    else:
        available = int(node)
    entries = []
    for item in runnable:
        if len(item) == 3:
            rid, weight, cap = item
        else:
            rid, weight = item
            cap = cap_millicores_per_rank
        entries.append((rid, to_fraction(weight), min(int(cap), cap_millicores_per_rank)))
    if not entries:
        return []
    if available <= 0:
        return [(rid, 0) for rid, _, _ in entries]

    alloc = {}
    active = list(range(len(entries)))
    remaining = available
    while active:
        total_w = sum(entries[i][1] for i in active)
        capped = [i for i in active if remaining * entries[i][1] / total_w >= entries[i][2]]
        if not capped:
            break
        for i in capped:
            alloc[i] = entries[i][2]
            remaining -= entries[i][2]
        active = [i for i in active if i not in alloc]
    if active:
        total_w = sum(entries[i][1] for i in active)
        shares = apportion_exact([entries[i][1] / total_w for i in active], remaining, "millicores")
        for i, s in zip(active, shares):
            alloc[i] = s
    return [(entries[i][0], alloc[i]) for i in range(len(entries))]


def step_period_oracle(quota_usec: Optional[int], period_usec: int, demand_millicores: int,
                       horizon_usec: int) -> dict:
    """Period-by-period throttle accounting for one cgroup with constant demand.

    Within each period the cgroup runs until its quota is spent or its demand
    is met. If the quota runs out strictly before the period ends it is
    suspended for the rest of that period and ``nr_throttled`` goes up by one.
    """
    if period_usec <= 0 or horizon_usec < 0 or horizon_usec % period_usec:
        raise ValidationError("horizon must be a non-negative multiple of the period")
    need = demand_millicores * period_usec
    run = Fraction(0)
    throttled = 0
    nr = 0
    for _ in range(horizon_usec // period_usec):
        if quota_usec is None or need <= quota_usec * MILLICORES_PER_CORE:
            run += Fraction(need, MILLICORES_PER_CORE)
            continue
        run += quota_usec
        exhausted_at = -(-quota_usec * MILLICORES_PER_CORE // demand_millicores)
        if exhausted_at < period_usec:
            throttled += period_usec - exhausted_at
            nr += 1
    run_usec = int(run) if run.denominator == 1 else run
    return {"run_usec": run_usec, "throttled_usec": throttled, "nr_throttled": nr}


# rank states
_COMPUTE = 0
_WAIT = 1


class _RankState:
    __slots__ = (
        "idx", "profile", "node", "chunks", "remaining", "state", "throttled", "throttle_start",
        "used", "quota_mc", "period", "weight", "demand", "request", "limit", "next_boundary",
        "arrival", "stats", "window",
    )


class Simulator:
    """Stateful engine behind :func:`simulate`.

    Use directly when resizes or progress triggers must be injected while the
    run is in flight (see :mod:`rankaware.scaling`).
    """

    def __init__(self, scenario: SimScenario):
        self.scenario = scenario
        self.t = 0
        self.iterations_done = 0
        self.round = 0
        self.iteration_start = 0
        self.round_start = 0
        self.release_at: Optional[int] = None
        self.finished = False
        self.per_iteration: list[int] = []
        self.rounds: list[RoundRecord] = []
        self.resize_log: list[dict] = []
        self._pending_resizes: list = []  # heap of (apply_time, seq, rank, request, limit, log_index)
        self._timed: list = []  # heap of (time, seq, callback)
        self._iteration_hooks: list[Callable] = []
        self._seq = itertools.count()
        self._next_sample = scenario.sample_interval_usec
        self._last_sample = 0

        K = scenario.comm_rounds
        self.ranks: list[_RankState] = []
        for i, prof in enumerate(scenario.ranks):
            st = _RankState()
            st.idx = i
            st.profile = prof
            st.node = prof.node_id
            work = prof.work_per_iteration
            st.chunks = apportion_exact([Fraction(1, K)] * K, work, "millicore-usec")
            st.remaining = st.chunks[0]
            st.state = _COMPUTE
            st.throttled = False
            st.throttle_start = 0
            st.used = 0
            st.period = prof.cgroup.period_usec
            st.quota_mc = None if prof.cgroup.unlimited else prof.cgroup.quota_usec * MILLICORES_PER_CORE
            st.weight = prof.cgroup.cpu_weight
            st.demand = prof.demand_millicores
            st.request = prof.request_millicores
            lim = prof.cgroup.limit_millicores
            st.limit = None if lim is None else lim
            st.next_boundary = st.period
            st.arrival = None
            st.stats = RankStats()
            st.window = 0
            self.ranks.append(st)
        self._node_members = [list(n.resident_rank_ids) for n in scenario.nodes]

    # -- external control ------------------------------------------------

    def on_iteration(self, hook: Callable) -> None:
        """``hook(sim, iterations_done, t)`` after every completed iteration."""
        self._iteration_hooks.append(hook)

    def call_at(self, time_usec: int, callback: Callable) -> None:
        """Run ``callback(sim)`` at virtual time ``time_usec`` (before resizes at that instant)."""
        if time_usec < self.t:
            raise ValidationError("cannot schedule a callback in the past")
        heapq.heappush(self._timed, (int(time_usec), next(self._seq), callback))

    def resize(self, rank_id: int, effective_time_usec: int, request_millicores: Optional[int] = None,
               limit_millicores: Optional[int] = None, cgroup: Optional[CgroupParams] = None,
               patched_at_usec: Optional[int] = None) -> dict:
        """Queue an in-place resize; it takes hold at the first period boundary at or after
        ``effective_time_usec``.

        Raises :class:`ResizeConflict` under hard limits when the request would exceed
        the limit in force. The rank's progress is never touched.
        """
        if not 0 <= rank_id < len(self.ranks):
            raise ValidationError(f"no rank {rank_id}")
        if effective_time_usec < self.t:
            raise ValidationError("resize cannot take effect in the past")
        st = self.ranks[rank_id]
        mode = self.scenario.mode
        if cgroup is not None:
            request = cgroup.cpu_weight if request_millicores is None else request_millicores
            limit = cgroup.limit_millicores
            period = cgroup.period_usec
        else:
            request = st.request if request_millicores is None else request_millicores
            limit = limit_millicores
            period = st.period
        if request is None or request <= 0:
            raise ValidationError("resize needs a positive request")

        if mode is Mode.REQUESTS_ONLY:
            if limit is not None:
                raise ValidationError("requests-only ranks cannot be given a limit")
            new_quota = None
        else:
            effective_limit = limit if limit is not None else self._latest_limit(rank_id)
            if request > effective_limit:
                self._log_resize(rank_id, request, limit, effective_time_usec, None,
                                 "conflict", patched_at_usec)
                raise ResizeConflict(rank_id, request, effective_limit) from None
            quota_exact = Fraction(effective_limit) * period / MILLICORES_PER_CORE
            if quota_exact.denominator != 1:
                raise ValidationError("limit does not map to a whole-microsecond quota")
            new_quota = int(quota_exact)

        apply_at = -(-effective_time_usec // st.period) * st.period
        params = CgroupParams(quota_usec=new_quota, period_usec=period, cpu_weight=request)
        log_idx = len(self.resize_log)
        self._log_resize(rank_id, request, limit, effective_time_usec, apply_at, "scheduled",
                         patched_at_usec)
        heapq.heappush(self._pending_resizes, (apply_at, next(self._seq), rank_id, params, request, log_idx))
        return self.resize_log[log_idx]

    def _latest_limit(self, rank_id):
        lim = self.ranks[rank_id].limit
        for entry in self.resize_log:
            if entry["rank"] == rank_id and entry["status"] == "scheduled" and entry["limit_millicores"] is not None:
                lim = entry["limit_millicores"]
        return lim

    def _log_resize(self, rank_id, request, limit, effective, apply_at, status, patched_at):
        entry = {
            "rank": rank_id,
            "request_millicores": request,
            "limit_millicores": limit,
            "patched_at_usec": self.t if patched_at is None else patched_at,
            "effective_usec": effective,
            "applied_at_usec": apply_at,
            "status": status,
            "progress_at_apply": None,
        }
        self.resize_log.append(entry)
        return entry

    # -- main loop ---------------------------------------------------------

    def run(self) -> SimResult:
        while True:
            self._process_instant()
            if self.finished:
                break
            rates = self._compute_rates()
            dt = self._next_dt(rates)
            self._advance(dt, rates)
        return self._result()

    def _process_instant(self):
        t = self.t
        while self._timed and self._timed[0][0] == t:
            _, _, cb = heapq.heappop(self._timed)
            cb(self)
        while self._pending_resizes and self._pending_resizes[0][0] == t:
            _, _, rid, params, request, log_idx = heapq.heappop(self._pending_resizes)
            self._apply_params(rid, params, request, log_idx)

        for st in self.ranks:
            if st.next_boundary == t:
                if st.throttled:
                    st.stats.throttled_usec += t - st.throttle_start
                    st.throttled = False
                st.used = 0
                st.next_boundary = t + st.period

        for st in self.ranks:
            if st.state == _COMPUTE and st.remaining == 0:
                st.state = _WAIT
                st.arrival = t

        while not self.finished:
            if self.release_at is None and all(st.state == _WAIT for st in self.ranks):
                self.release_at = t + self.scenario.barrier_latency_usec
            if self.release_at is not None and self.release_at == t:
                self._release()
                continue
            break

        if self.finished:
            return
        spin = self.scenario.spin_wait
        for st in self.ranks:
            if st.quota_mc is None or st.throttled or st.used < st.quota_mc:
                continue
            wants = (st.state == _COMPUTE and st.remaining > 0) or (st.state == _WAIT and spin)
            if wants:
                st.throttled = True
                st.throttle_start = t
                st.stats.nr_throttled += 1

    def _apply_params(self, rid, params: CgroupParams, request, log_idx):
        st = self.ranks[rid]
        st.weight = params.cpu_weight
        st.request = request
        st.quota_mc = None if params.unlimited else params.quota_usec * MILLICORES_PER_CORE
        st.limit = params.limit_millicores
        if params.period_usec != st.period:
            st.period = params.period_usec
            st.next_boundary = self.t + st.period
        entry = self.resize_log[log_idx]
        entry["status"] = "applied"
        entry["progress_at_apply"] = {
            "iteration": self.iterations_done,
            "round": self.round,
            "chunk_remaining_millicore_usec": st.remaining if st.state == _COMPUTE else 0,
        }

    def _release(self):
        t = self.t
        self.rounds.append(RoundRecord(
            iteration=self.iterations_done,
            round=self.round,
            start_usec=self.round_start,
            arrival_usec=tuple(st.arrival for st in self.ranks),
            release_usec=t,
        ))
        self.release_at = None
        self.round += 1
        self.round_start = t
        if self.round == self.scenario.comm_rounds:
            self.round = 0
            self.per_iteration.append(t - self.iteration_start)
            self.iteration_start = t
            self.iterations_done += 1
            for hook in self._iteration_hooks:
                hook(self, self.iterations_done, t)
            if self.iterations_done == self.scenario.iterations:
                self.finished = True
                return
        for st in self.ranks:
            st.remaining = st.chunks[self.round]
            st.arrival = None
            if st.remaining == 0:
                st.state = _WAIT
                st.arrival = t
            else:
                st.state = _COMPUTE

    def _compute_rates(self) -> list[int]:
        rates = [0] * len(self.ranks)
        spin = self.scenario.spin_wait
        for n, members in enumerate(self._node_members):
            runnable = []
            computing = False
            for r in members:
                st = self.ranks[r]
                if st.throttled:
                    continue
                if st.state == _COMPUTE and st.remaining > 0:
                    computing = True
                elif not (st.state == _WAIT and spin):
                    continue
                runnable.append((r, st.weight, st.demand))
            if not runnable:
                continue
            node = self.scenario.nodes[n]
            if node.available_millicores <= 0 and computing:
                raise UnschedulableScenario(
                    f"node {n} has no capacity left after {node.background_load_millicores}m background load"
                )
            for rid, share in fair_share(node, runnable):
                rates[rid] = share
        return rates

    def _next_dt(self, rates) -> int:
        t = self.t
        best = None

        def consider(when):
            nonlocal best
            if best is None or when < best:
                best = when

        for st, rate in zip(self.ranks, rates):
            if st.quota_mc is not None:
                consider(st.next_boundary)
            if rate <= 0:
                continue
            if st.state == _COMPUTE:
                consider(t + -(-st.remaining // rate))
            if st.quota_mc is not None:
                consider(t + -(-(st.quota_mc - st.used) // rate))
        if self.release_at is not None:
            consider(self.release_at)
        if self._pending_resizes:
            consider(self._pending_resizes[0][0])
        if self._timed:
            consider(self._timed[0][0])
        if best is None:
            raise UnschedulableScenario(f"no rank can make progress at t={t}us")
        consider(self._next_sample)
        return best - t

    def _advance(self, dt, rates):
        for st, rate in zip(self.ranks, rates):
            if rate <= 0:
                continue
            amount = rate * dt
            if st.quota_mc is not None:
                amount = min(amount, st.quota_mc - st.used)
            if st.state == _COMPUTE:
                amount = min(amount, st.remaining)
            if st.quota_mc is not None:
                st.used += amount
            if st.state == _COMPUTE:
                st.remaining -= amount
                st.stats.work_millicore_usec += amount
            else:
                st.stats.spin_millicore_usec += amount
            st.stats.cpu_millicore_usec += amount
            st.window += amount
        self.t += dt
        if self.t == self._next_sample:
            self._take_sample()
            self._next_sample += self.scenario.sample_interval_usec

    def _take_sample(self):
        span = self.t - self._last_sample
        for st in self.ranks:
            st.stats.cpu_usage_series.append((self.t, round(Fraction(st.window, span))))
            st.window = 0
        self._last_sample = self.t

    def _result(self) -> SimResult:
        if self.t > self._last_sample:
            self._take_sample()
        for st in self.ranks:
            series = st.stats.cpu_usage_series
            first = series[0][1] if series else 0
            series.insert(0, (0, first))
            if st.throttled:
                st.stats.throttled_usec += self.t - st.throttle_start
                st.throttled = False
        for entry in self.resize_log:
            if entry["status"] == "scheduled":
                entry["status"] = "not-applied"
        return SimResult(
            wall_clock_usec=self.t,
            per_rank=[st.stats for st in self.ranks],
            per_iteration_wall_usec=list(self.per_iteration),
            iterations_completed=self.iterations_done,
            rounds=self.rounds,
            resize_log=self.resize_log,
            scenario=self.scenario,
        )


def simulate(scenario: SimScenario) -> SimResult:
    """Run a scenario to completion. Applies ``scenario.phase_schedule`` when present."""
    if scenario.phase_schedule is not None:
        from .scaling import apply_plan_in_sim, build_patch_plan

        plan = build_patch_plan(scenario.phase_schedule)
        return apply_plan_in_sim(plan, scenario, sync_delay_usec=0)
    return Simulator(scenario).run()


def apply_resize(sim: Simulator, rank_id: int, new_cgroup: Optional[CgroupParams] = None,
                 effective_time_usec: Optional[int] = None, *, request_millicores: Optional[int] = None,
                 limit_millicores: Optional[int] = None) -> dict:
    """Functional spelling of :meth:`Simulator.resize`."""
    if effective_time_usec is None:
        effective_time_usec = sim.t
    return sim.resize(rank_id, effective_time_usec, request_millicores=request_millicores,
                      limit_millicores=limit_millicores, cgroup=new_cgroup)
