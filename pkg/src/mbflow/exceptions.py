"""Exception types raised across the package."""


class BatchSystemError(ValueError):
    """A batch system violates one of its structural relations.

    ``relation`` names the failed check: one of ``"weight_sum"``,
    ``"prob_sum"``, ``"prob_positive"``, ``"empty_batch"``, ``"coverage"``,
    ``"compatibility"`` or ``"shape"``.
    """

    def __init__(self, relation, message):
        super().__init__(message)
        self.relation = relation


class DomainError(ValueError):
    """A state lies outside the effective domain of a potential."""


class InfeasibleError(ValueError):
    """A polyhedron has no feasible point."""


class SolverError(RuntimeError):
    """An inner solve (prox iteration, Newton) failed to converge."""

    def __init__(self, message, time=None, history=None):
        if time is not None:
            message = f"{message} (at t={time:.6g})"
        super().__init__(message)
        self.time = time
        self.history = list(history) if history is not None else []


class ConfigError(ValueError):
    """Experiment configuration failed strict validation."""

    def __init__(self, message, path=None):
        if path:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
