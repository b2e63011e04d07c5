"""Exception hierarchy shared by the solver layers."""


class DsqpError(Exception):
    """Base class for all solver errors."""


class EvaluationError(DsqpError):
    """A subsystem evaluator returned NaN/Inf or the wrong shape."""

    def __init__(self, subsystem, component, message=""):
        self.subsystem = subsystem
        self.component = component
        super().__init__(
            f"subsystem {subsystem}: evaluation of {component} failed"
            + (f" ({message})" if message else "")
        )


class RegularityError(DsqpError):
    """Rank deficiency (LICQ violation) or a singular KKT matrix."""


class ConfigError(DsqpError):
    """Invalid solver or run configuration."""


class NotConsensusError(DsqpError):
    """The averaging path was requested for a problem without consensus metadata."""


class QPInfeasibleError(DsqpError):
    """A quadratic subproblem has an empty feasible set."""


class InnerInfeasibleError(QPInfeasibleError):
    """A local ADMM subproblem is infeasible."""

    def __init__(self, subsystem, message=""):
        self.subsystem = subsystem
        super().__init__(
            f"local QP of subsystem {subsystem} is infeasible"
            + (f": {message}" if message else "")
        )


class CoordinationInfeasibleError(QPInfeasibleError):
    """The coupling rows admit no feasible copy vector."""


class InnerStallError(DsqpError):
    """ADMM hit its iteration cap before the stopping test passed.

    The best (last) inner state and the inner trace are attached so the
    caller can decide whether to abort or accept the step.
    """

    def __init__(self, state, trace, message="inner iteration limit reached"):
        self.state = state
        self.trace = trace
        super().__init__(message)


class OracleError(DsqpError):
    """The brute-force oracle could not find a stationary point."""
