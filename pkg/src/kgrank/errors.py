"""Exception types shared across the package.

Input-side problems (bad files, bad configuration) derive from InputError and
map to CLI exit code 2; violated internal contracts map to exit code 3.
"""


class KgrankError(Exception):
    """Base class for all package errors."""


class InputError(KgrankError):
    """A problem with user-supplied files, arguments, or configuration."""


class ParseError(InputError):
    """Malformed input file; message carries the file and line number."""


class ValidationError(InputError):
    """Structurally valid input that violates a documented precondition."""


class ConfigurationError(InputError):
    """Inconsistent or infeasible configuration values."""


class ShapeError(KgrankError):
    """Tensor operation applied to incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class ComputationError(KgrankError):
    """Non-finite values or domain violations inside a numeric computation."""


class UsageError(KgrankError):
    """An API used outside its contract (e.g. backward on an unrecorded tensor)."""
