"""Exception hierarchy shared by all modules."""


class BpmpcError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(BpmpcError, ValueError):
    pass


class NotPositiveDefinite(BpmpcError, ValueError):
    """Cost matrix failed its Cholesky factorization."""


class InfeasibleProblem(BpmpcError):
    """The QP (or a hard-constrained MPC problem) has no feasible point."""


class InfeasibleAt(InfeasibleProblem):
    """A hard-mode rollout hit an infeasible MPC problem at time step ``t``."""

    def __init__(self, t, message=None):
        self.t = t
        super().__init__(message or f"MPC problem infeasible at time step t={t}")


class MaxIterReached(BpmpcError):
    pass


class SingularU(BpmpcError, ArithmeticError):
    """The fixed-point Jacobian U is singular (LICQ violated)."""


class NoConvergence(BpmpcError, ArithmeticError):
    pass


class BadParameterization(BpmpcError, ValueError):
    pass


class DecodeError(BpmpcError, ValueError):
    pass


class EmptyPolytope(BpmpcError, ValueError):
    pass


class SingularMassMatrix(BpmpcError, ArithmeticError):
    pass


class ConfigError(BpmpcError, ValueError):
    """Invalid experiment configuration; ``field`` names the offending entry."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ParameterBoundExceeded(BpmpcError):
    pass
