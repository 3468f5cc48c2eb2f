"""Exception hierarchy.

Validation problems (bad weights, budgets, malformed files) derive from
``ValidationError`` and simulation-time failures from ``SimulationError`` so the
CLI can map them to distinct exit codes.
"""


class RankAwareError(Exception):
    pass


class ValidationError(RankAwareError, ValueError):
    pass


class SimulationError(RankAwareError, RuntimeError):
    pass


class BudgetTooSmall(ValidationError):
    pass


class NonIntegralQuota(ValidationError):
    pass


class MalformedReport(ValidationError):
    pass


class RankGap(MalformedReport):
    pass


class EmptySeries(ValidationError):
    pass


class UnschedulableScenario(SimulationError):
    pass


class ResizeConflict(SimulationError):
    """A resize asked for a request above the container's hard limit."""

    def __init__(self, rank_id, request_millicores, limit_millicores):
        self.rank_id = rank_id
        self.request_millicores = request_millicores
        self.limit_millicores = limit_millicores
        super().__init__(
            f"rank {rank_id}: requested {request_millicores}m exceeds hard limit "
            f"{limit_millicores}m"
        )
