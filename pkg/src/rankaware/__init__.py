"""Rank-aware CPU allocation and CFS throttling simulation for MPI jobs on Kubernetes."""

__version__ = "0.1.0"

from .alloc import (
    AllocationPlan,
    CellApportionment,
    CgroupParams,
    Mode,
    WeightVector,
    allocate_cpu,
    apportion_cells,
    apportion_exact,
    cell_fractions,
    quota_for_limit,
)
from .cfs import (
    NodeSpec,
    RankProfile,
    SimResult,
    SimScenario,
    Simulator,
    apply_resize,
    fair_share,
    simulate,
    step_period_oracle,
)
from .errors import (
    BudgetTooSmall,
    EmptySeries,
    MalformedReport,
    NonIntegralQuota,
    RankGap,
    ResizeConflict,
    SimulationError,
    UnschedulableScenario,
    ValidationError,
)
from .metrics import (
    UsageSeries,
    cpu_hours,
    packing_headroom,
    resource_efficiency,
    speedup_and_parallel_efficiency,
)
from .scaling import (
    AtIteration,
    AtProgressFraction,
    AtTime,
    PatchPlan,
    PhaseSchedule,
    ProgressSignal,
    apply_plan_in_sim,
    build_patch_plan,
    detect_transition,
    phase_allocation,
)
