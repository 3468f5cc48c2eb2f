"""Load-proportional CPU apportionment for MPI ranks.

Weights come from the domain decomposition (cell counts or partitioner
weights). Every rank receives a share of the CPU budget proportional to its
weight, rounded to whole millicores so that the shares add up to the budget
exactly. Arithmetic stays in :class:`fractions.Fraction` until the final
rounding step.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .errors import BudgetTooSmall, NonIntegralQuota, ValidationError

DEFAULT_PERIOD_USEC = 100_000
MILLICORES_PER_CORE = 1000


class Mode(str, enum.Enum):
    HARD_LIMITS = "hard-limits"
    REQUESTS_ONLY = "requests-only"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, Mode):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {
            "hard-limits": cls.HARD_LIMITS,
            "hardlimits": cls.HARD_LIMITS,
            "guaranteed": cls.HARD_LIMITS,
            "requests-only": cls.REQUESTS_ONLY,
            "requestsonly": cls.REQUESTS_ONLY,
            "burstable": cls.REQUESTS_ONLY,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown allocation mode {value!r}") from None


def to_fraction(value) -> Fraction:
    """Exact conversion; floats go through their shortest repr so 0.1 -> 1/10."""
    if isinstance(value, bool):
        raise ValidationError(f"not a number: {value!r}")
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValidationError(f"not a finite number: {value!r}")
        return Fraction(repr(value))
    try:
        return Fraction(value)
    except (TypeError, ValueError, ZeroDivisionError):
        raise ValidationError(f"not a number: {value!r}") from None


@dataclass(frozen=True)
class WeightVector:
    weights: tuple

    def __init__(self, weights: Iterable):
        values = tuple(to_fraction(w) for w in weights)
        if not values:
            raise ValidationError("weight vector must contain at least one rank")
        for i, w in enumerate(values):
            if w <= 0:
                raise ValidationError(f"weight of rank {i} must be positive, got {w}")
        object.__setattr__(self, "weights", values)

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def as_integers(self) -> list[int]:
        """Smallest integer vector with the same ratios."""
        scale = 1
        for w in self.weights:
            scale = math.lcm(scale, w.denominator)
        ints = [int(w * scale) for w in self.weights]
        g = math.gcd(*ints)
        return [v // g for v in ints]


@dataclass(frozen=True)
class CgroupParams:
    """CFS bandwidth settings for one container.

    ``quota_usec`` of ``None`` means unlimited (``cpu.max`` = "max").
    """

    quota_usec: Optional[int]
    period_usec: int = DEFAULT_PERIOD_USEC
    cpu_weight: int = 100

    def __post_init__(self):
        if self.period_usec <= 0:
            raise ValidationError("period_usec must be positive")
        if self.quota_usec is not None and self.quota_usec <= 0:
            raise ValidationError("quota_usec must be positive or None (unlimited)")
        if self.cpu_weight <= 0:
            raise ValidationError("cpu_weight must be positive")

    @property
    def unlimited(self) -> bool:
        return self.quota_usec is None

    @property
    def limit_millicores(self) -> Optional[Fraction]:
        if self.quota_usec is None:
            return None
        return Fraction(self.quota_usec * MILLICORES_PER_CORE, self.period_usec)

    def cpu_max(self) -> str:
        """The cgroup v2 ``cpu.max`` line."""
        quota = "max" if self.quota_usec is None else str(self.quota_usec)
        return f"{quota} {self.period_usec}"


@dataclass(frozen=True)
class CellApportionment:
    total_cells: int
    cells_per_rank: tuple

    def __post_init__(self):
        if sum(self.cells_per_rank) != self.total_cells:
            raise ValidationError("cells_per_rank must sum to total_cells")


@dataclass(frozen=True)
class AllocationPlan:
    requests_millicores: tuple
    budget_millicores: int
    mode: Mode
    fractions: tuple
    limits_millicores: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "requests_millicores", tuple(int(r) for r in self.requests_millicores))
        object.__setattr__(self, "fractions", tuple(to_fraction(f) for f in self.fractions))
        object.__setattr__(self, "mode", Mode.parse(self.mode))
        if self.limits_millicores is not None:
            object.__setattr__(self, "limits_millicores", tuple(int(v) for v in self.limits_millicores))

        n = len(self.requests_millicores)
        if n == 0 or len(self.fractions) != n:
            raise ValidationError("plan needs one request and one fraction per rank")
        if any(r < 0 for r in self.requests_millicores):
            raise ValidationError("requests must be non-negative")
        if sum(self.requests_millicores) != self.budget_millicores:
            raise ValidationError(
                f"requests sum to {sum(self.requests_millicores)}m, budget is {self.budget_millicores}m"
            )
        if sum(self.fractions) != 1:
            raise ValidationError("fractions must sum to exactly 1")
        if self.mode is Mode.HARD_LIMITS:
            if self.limits_millicores is None or len(self.limits_millicores) != n:
                raise ValidationError("hard-limits plan needs one limit per rank")
            for i, (req, lim) in enumerate(zip(self.requests_millicores, self.limits_millicores)):
                if lim < req:
                    raise ValidationError(f"rank {i}: limit {lim}m below request {req}m")
        elif self.limits_millicores is not None:
            raise ValidationError("requests-only plan must not carry limits")

    @property
    def n_ranks(self) -> int:
        return len(self.requests_millicores)

    def cgroups(self, period_usec: int = DEFAULT_PERIOD_USEC) -> list[CgroupParams]:
        return cgroup_params(self, period_usec)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode.value,
            "budget_millicores": self.budget_millicores,
            "requests_millicores": list(self.requests_millicores),
            "limits_millicores": None if self.limits_millicores is None else list(self.limits_millicores),
            "fractions": [str(f) for f in self.fractions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AllocationPlan":
        requests = [int(r) for r in data["requests_millicores"]]
        fractions = data.get("fractions")
        if fractions is None:
            total = sum(requests)
            fractions = [Fraction(r, total) for r in requests]
        return cls(
            requests_millicores=requests,
            budget_millicores=int(data.get("budget_millicores", sum(requests))),
            mode=data.get("mode", Mode.REQUESTS_ONLY),
            fractions=fractions,
            limits_millicores=data.get("limits_millicores"),
        )

    @classmethod
    def explicit(cls, requests: Sequence[int], limits: Optional[Sequence[int]] = None,
                 mode=None) -> "AllocationPlan":
        """Plan from hand-picked per-rank values rather than weights."""
        if mode is None:
            mode = Mode.REQUESTS_ONLY if limits is None else Mode.HARD_LIMITS
        total = sum(requests)
        if total <= 0:
            raise ValidationError("explicit plan needs a positive total request")
        return cls(
            requests_millicores=tuple(requests),
            budget_millicores=total,
            mode=mode,
            fractions=tuple(Fraction(r, total) for r in requests),
            limits_millicores=None if limits is None else tuple(limits),
        )


def cell_fractions(weights) -> list[Fraction]:
    """Normalised weights ``w_i / sum(w)`` as exact fractions."""
    if not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    total = sum(weights.weights)
    return [w / total for w in weights.weights]


def apportion_exact(fractions: Sequence, total: int, unit_name: str = "units") -> list[int]:
    """Largest-remainder (Hamilton) rounding of ``fraction * total``.

    Each rank gets the floor of its quota; the units left over go to the
    largest fractional remainders, ties broken toward the lower rank index.
    The result sums to ``total`` and no entry is a full unit away from its
    exact quota.
    """
    fracs = [to_fraction(f) for f in fractions]
    if not fracs:
        raise ValidationError("nothing to apportion")
    if any(f < 0 for f in fracs):
        raise ValidationError("fractions must be non-negative")
    if sum(fracs) != 1:
        raise ValidationError(f"fractions must sum to 1 to apportion {unit_name}")
    if isinstance(total, bool) or int(total) != total or total < 0:
        raise ValidationError(f"total {unit_name} must be a non-negative integer")
    total = int(total)

    quotas = [f * total for f in fracs]
    shares = [math.floor(q) for q in quotas]
    leftover = total - sum(shares)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - shares[i]), i))
    for i in order[:leftover]:
        shares[i] += 1
    return shares


def apportion_cells(weights, total_cells: int) -> CellApportionment:
    cells = apportion_exact(cell_fractions(weights), total_cells, "cells")
    return CellApportionment(total_cells=total_cells, cells_per_rank=tuple(cells))


def allocate_cpu(weights, budget_millicores: int, mode=Mode.REQUESTS_ONLY) -> AllocationPlan:
    """Split ``budget_millicores`` across ranks in proportion to their weights."""
    if not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    mode = Mode.parse(mode)
    if isinstance(budget_millicores, bool) or int(budget_millicores) != budget_millicores or budget_millicores <= 0:
        raise ValidationError("budget_millicores must be a positive integer")
    budget_millicores = int(budget_millicores)
    n = len(weights)
    if budget_millicores < n:
        raise BudgetTooSmall(f"budget {budget_millicores}m cannot give {n} ranks at least 1m each")

    fractions = cell_fractions(weights)
    requests = apportion_exact(fractions, budget_millicores, "millicores")
    starved = [i for i, r in enumerate(requests) if r == 0]
    if starved:
        raise BudgetTooSmall(
            f"budget {budget_millicores}m leaves rank(s) {starved} with 0m; raise the budget"
        )
    limits = tuple(requests) if mode is Mode.HARD_LIMITS else None
    return AllocationPlan(
        requests_millicores=tuple(requests),
        budget_millicores=budget_millicores,
        mode=mode,
        fractions=tuple(fractions),
        limits_millicores=limits,
    )


def quota_for_limit(limit_millicores: int, period_usec: int = DEFAULT_PERIOD_USEC,
                    cpu_weight: Optional[int] = None) -> CgroupParams:
    """CFS quota for a CPU limit: ``limit[cores] * period``."""
    if limit_millicores <= 0 or period_usec <= 0:
        raise ValidationError("limit and period must be positive")
    quota, rem = divmod(limit_millicores * period_usec, MILLICORES_PER_CORE)
    if rem:
        raise NonIntegralQuota(
            f"{limit_millicores}m over a {period_usec}us period is not a whole number of microseconds"
        )
    return CgroupParams(quota_usec=quota, period_usec=period_usec,
                        cpu_weight=cpu_weight if cpu_weight is not None else limit_millicores)


def cgroup_params(plan: AllocationPlan, period_usec: int = DEFAULT_PERIOD_USEC) -> list[CgroupParams]:
    # cpu.weight tracks the request one-to-one so contended shares keep the request ratio
    out = []
    for i, req in enumerate(plan.requests_millicores):
        weight = max(req, 1)
        if plan.mode is Mode.HARD_LIMITS:
            out.append(quota_for_limit(plan.limits_millicores[i], period_usec, cpu_weight=weight))
        else:
            out.append(CgroupParams(quota_usec=None, period_usec=period_usec, cpu_weight=weight))
    return out


def format_plan_table(plan: AllocationPlan, weights: Optional[WeightVector] = None,
                      period_usec: int = DEFAULT_PERIOD_USEC) -> str:
    header = ["rank", "weight", "fraction", "request", "limit", "cpu.max"]
    rows = []
    groups = plan.cgroups(period_usec)
    for i in range(plan.n_ranks):
        w = "" if weights is None else str(weights.weights[i])
        limit = "-" if plan.limits_millicores is None else f"{plan.limits_millicores[i]}m"
        rows.append([str(i), w, str(plan.fractions[i]), f"{plan.requests_millicores[i]}m",
                     limit, groups[i].cpu_max()])
    rows.append(["total", "", "1", f"{sum(plan.requests_millicores)}m",
                 "-" if plan.limits_millicores is None else f"{sum(plan.limits_millicores)}m", ""])
    widths = [max(len(r[c]) for r in [header] + rows) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
    lines.append(f"mode: {plan.mode.value}, budget: {plan.budget_millicores}m")
    return "\n".join(lines)
