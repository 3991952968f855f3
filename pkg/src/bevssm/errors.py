"""Exception types shared across the package.

Every rejection path raises one of these so callers (and the CLI) can map
failures onto stable exit codes instead of pattern-matching messages.
"""


class BevssmError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(BevssmError, ValueError):
    """Shapes disagree. Messages name both offending shapes."""


class ConfigError(BevssmError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class NumericError(BevssmError, ArithmeticError):
    """Non-finite values or numerically invalid inputs were encountered."""


class CapacityError(BevssmError, ValueError):
    """An input exceeds a documented resource guard (e.g. sequence length)."""


class GraphError(BevssmError, ValueError):
    """The gradient tape cannot satisfy a request (unrecorded node, bad loss)."""


class FormatError(BevssmError, ValueError):
    """A serialized artifact does not conform to its container format."""
