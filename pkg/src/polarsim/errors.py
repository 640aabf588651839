"""Exception types shared across the simulator.

The CLI maps ConfigError to exit code 1 and everything else to 2, so
raising the right class matters at the boundaries.
"""


class PolarSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(PolarSimError, ValueError):
    """Invalid configuration: bad parameter domain, schema violation, unknown key."""


class ShapeError(PolarSimError, ValueError):
    """Structural mismatch: incompatible architectures, dimensions, or mask lengths."""


class InputError(PolarSimError, ValueError):
    """Unusable runtime input: empty dataset, missing file, degenerate test set."""


class NumericalError(PolarSimError, ArithmeticError):
    """Non-finite values produced where finite ones are required."""
