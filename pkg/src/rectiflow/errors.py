"""Exception taxonomy shared by all rectiflow modules.

The CLI maps these onto exit codes; see cli.py.
"""


class RectiflowError(Exception):
    """Base class for all rectiflow errors."""


class ShapeError(RectiflowError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(RectiflowError):
    """A numeric argument lies outside its allowed interval."""


class ContractError(RectiflowError):
    """An operation's calling contract was violated (empty batch, non-scalar loss, ...)."""


class ConfigError(RectiflowError):
    """A configuration value is invalid or unsupported."""


class CaptionParseError(RectiflowError):
    """Caption text does not match the template bank."""

    def __init__(self, message: str, sentence: str = ""):
        super().__init__(message)
        self.sentence = sentence


class DataError(RectiflowError):
    """A dataset does not satisfy the preconditions of the requested run."""


class DivergenceError(RectiflowError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointFormatError(RectiflowError):
    """A checkpoint file is malformed; `field` names the offending part."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class CompatibilityError(RectiflowError):
    """A checkpoint does not match the requested architecture; `field` names the mismatch."""

    def __init__(self, message: str, field: str):
        super().__init__(message)
        self.field = field


class UndefinedMetricError(RectiflowError):
    """A metric is undefined for the given inputs (e.g. single-class ROC)."""
