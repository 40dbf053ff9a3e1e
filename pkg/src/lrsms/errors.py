"""Exception types shared across the package.

Every error raised by public API functions is one of these, so callers
(and the CLI exit-code mapping) can distinguish usage mistakes from
numerical failures and corrupt inputs.
"""


class LrsmsError(Exception):
    """Base class for all package errors."""


class ShapeError(LrsmsError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(LrsmsError, ValueError):
    """An argument is outside the mathematically valid domain."""


class NumericalError(LrsmsError, ArithmeticError):
    """A numerical routine failed (non-convergence, NaN/Inf encountered)."""


class ConsistencyError(LrsmsError, ValueError):
    """Two structures that must agree (plan vs. model, cache vs. model) do not."""


class FormatError(LrsmsError, ValueError):
    """A file does not conform to its on-disk format."""


class CorruptCheckpointError(FormatError):
    """Checkpoint integrity check failed (bad magic, truncation, checksum)."""

    def __init__(self, message, path=None, offset=None):
        super().__init__(message)
        self.path = path
        self.offset = offset


class DivergenceError(LrsmsError, RuntimeError):
    """Training loss ran away; carries the partial run record for post-mortem."""

    def __init__(self, message, run_record=None):
        super().__init__(message)
        self.run_record = run_record
