"""Exception hierarchy shared by all modules."""


class SymctlError(Exception):
    """Base class for every error raised by the toolkit."""


class NumericalBlowupError(SymctlError):
    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage


class ConfigurationError(SymctlError):
    pass


class DegenerateError(SymctlError):
    """Singular or ill-conditioned matrix where an invertible one is required."""


class IndeterminateError(SymctlError):
    """A numerical decision procedure could not settle its answer."""


class StabilizabilityError(SymctlError):
    pass


class DesignFailure(SymctlError):
    pass


class ConstructionError(SymctlError):
    pass


class InfeasibleSpecError(SymctlError):
    pass


class SizeCapError(SymctlError):
    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


class DomainExitError(SymctlError):
    """The controller is undefined at a reached state.

    ``trajectory`` holds the partial trajectory up to (and including) the
    offending state.
    """

    def __init__(self, message, trajectory=None, state=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.state = state


class SchemaError(SymctlError):
    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location
