"""
Exception hierarchy shared by every MADI module.

Library code raises these; the command-line entry point maps them onto exit codes.
"""


class MadiError(Exception):
    """Base class for all pipeline errors."""


class ContractViolation(MadiError):
    """A documented precondition was broken by the caller."""


class NumericalFailureError(MadiError):
    """A NaN or infinite value appeared in a forward or backward pass."""

    def __init__(self, message: str, op_name: str | None = None):
        super().__init__(message)
        self.op_name = op_name


class ConfigurationError(MadiError, ValueError):
    """Configuration values are missing, empty or out of range."""


class DatasetFormatError(MadiError):
    """A dataset record could not be parsed."""

    def __init__(self, message: str, line_number: int):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class TemplateNotApplicable(MadiError):
    """The requested question template does not fit the series attributes."""


class CheckpointError(MadiError):
    """A checkpoint file is malformed or does not match the model."""


class TrainingDivergedError(MadiError):
    """The training loss became NaN or infinite."""

    def __init__(self, step: int, component: str = "loss"):
        super().__init__(f"training diverged at step {step} ({component} is not finite)")
        self.step = step
        self.component = component
