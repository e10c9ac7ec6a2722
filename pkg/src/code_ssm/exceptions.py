"""
Exception hierarchy for code-ssm.

Every error raised on purpose by the package derives from CodeSSMError so the
command-line entry point can map it onto an exit code.
"""


class CodeSSMError(Exception):
    """Base class for all code-ssm errors."""

    kind = "runtime"


class ShapeError(CodeSSMError, ValueError):
    """Tensor shapes or sizes do not agree."""

    kind = "shape"


class SequenceLengthError(ShapeError):
    """Input is longer than a fixed positional table allows."""

    kind = "length"


class InvalidInputError(CodeSSMError, ValueError):
    """Input is well-shaped but degenerate (empty, zero norm, no valid positions)."""

    kind = "input"


class SingularityError(CodeSSMError, ArithmeticError):
    """A state-space eigenvalue is exactly zero."""

    kind = "singular"


class NonFiniteError(CodeSSMError, ArithmeticError):
    """A loss or gradient became NaN or infinite."""

    kind = "non_finite"

    def __init__(self, message: str, tensor_name: str = ""):
        super().__init__(message)
        self.tensor_name = tensor_name


class ConfigError(CodeSSMError, ValueError):
    """Configuration key is unknown or its value is out of range."""

    kind = "config"


class CheckpointError(CodeSSMError):
    """Checkpoint file cannot be read back faithfully."""

    kind = "checkpoint"

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
