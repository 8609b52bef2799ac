"""Exception hierarchy shared across the package.

Everything raised on purpose derives from :class:`RelpropError`, so callers
(and the CLI) can catch one type. Most errors also inherit the matching
builtin category (``ValueError``, ``ArithmeticError``, ...) so code that is
unaware of this package still handles them sensibly.
"""


class RelpropError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(RelpropError, ValueError):
    """Operands have incompatible or invalid shapes/parameters."""


class BuildError(RelpropError, ValueError):
    """A network description failed validation."""


class RuleError(RelpropError, ValueError):
    """A propagation-rule assignment is invalid for the network."""


class MaskError(RelpropError, ValueError):
    """A channel mask references a layer or channel that cannot be masked."""


class GraphError(RelpropError, ValueError):
    """Relevance-graph construction or query is inconsistent."""


class DivisionGuardError(RelpropError, ArithmeticError):
    """An exact-zero denominator would silently discard relevance."""


class SwitchIndexError(RelpropError, IndexError):
    """A pooling switch map points outside its target tensor."""


class DecodeError(RelpropError, ValueError):
    """An image file exists but could not be decoded."""


class CliError(RelpropError, ValueError):
    """Command-line arguments are inconsistent with the loaded model or inputs."""


class WeightFormatError(RelpropError, ValueError):
    """Base class for weight-file reader failures."""


class BadMagicError(WeightFormatError):
    """The file does not start with the expected magic bytes."""


class VersionMismatchError(WeightFormatError):
    """The file declares a container version this reader does not support."""


class TruncatedFileError(WeightFormatError):
    """The file ended before the declared contents (or carries trailing data)."""


class ChecksumError(WeightFormatError):
    """The trailing checksum does not match the file contents."""


class UnsupportedDtypeError(WeightFormatError):
    """A tensor record declares an element type this reader does not support."""
