"""Exception hierarchy shared across the package."""


class CopdFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(CopdFlowError, ValueError):
    pass


class DomainError(CopdFlowError, ValueError):
    pass


class ContractError(CopdFlowError, ValueError):
    """A precondition of an operation was violated by the caller."""


class TrainingDivergedError(CopdFlowError, RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class DegenerateSampleError(CopdFlowError, ValueError):
    pass


class ParseError(CopdFlowError, ValueError):
    pass


class SimulationEnvironmentError(CopdFlowError, RuntimeError):
    """Too many flow simulations failed to converge; the solver config is off."""


class MissingArtifactError(CopdFlowError, FileNotFoundError):
    pass
