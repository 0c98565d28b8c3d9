"""Exception types shared across the library.

Everything derives from PosekitError so callers (including the CLI) can
catch library failures in one place. The subclasses also inherit ValueError
to stay friendly to generic error handling.
"""


class PosekitError(Exception):
    """Base class for all posekit errors."""


class DimensionError(PosekitError, ValueError):
    """Operand shapes or grid sizes do not line up."""


class DomainError(PosekitError, ValueError):
    """Input violates an operation's domain (empty body, NaN, bad range)."""


class FormatError(PosekitError, ValueError):
    """A file does not conform to its declared on-disk format."""


class PolicyError(PosekitError, ValueError):
    """A selection policy cannot be satisfied by the available data."""
