"""Exception hierarchy shared by every module of the package."""


class Motion2SpecError(Exception):
    """Base class for all package errors."""


class DimensionError(Motion2SpecError, ValueError):
    """Operand shapes do not conform."""


class NumericError(Motion2SpecError, ArithmeticError):
    """A forward value or gradient became NaN or infinite."""


class ContractError(Motion2SpecError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(Motion2SpecError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(Motion2SpecError, ValueError):
    """User-supplied data is unusable (too short, wrong rate, ...)."""


class FormatError(Motion2SpecError, ValueError):
    """A file parses but its header contradicts its payload."""


class IntegrityError(Motion2SpecError, ValueError):
    """A file is truncated, corrupted or fails its checksum."""


class IncompatibleCheckpointError(Motion2SpecError, ValueError):
    """A checkpoint was produced for a different model configuration."""


class TrainingAborted(Motion2SpecError, RuntimeError):
    """Training stopped on a non-finite loss; a checkpoint of the last good state may exist."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class UnknownSubjectError(Motion2SpecError, LookupError):
    """A subject id is not present in the dataset manifest."""
