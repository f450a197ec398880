"""Exception hierarchy shared by the solvers."""


class SBridgeError(Exception):
    pass


class DomainError(SBridgeError, ValueError):
    """Input outside the domain of an operation (shape, sign, support)."""


class InfeasibleError(SBridgeError):
    """The requested transfer cannot be realised (unreachable mass, unmaintainable covariance)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class NonConvergenceError(SBridgeError):
    """An iterative solver exhausted its budget."""

    def __init__(self, message, last_change=None, log=None):
        super().__init__(message)
        self.last_change = last_change
        self.log = log or []


class UnsupportedConfiguration(SBridgeError):
    pass


class SimulationError(SBridgeError):
    pass
