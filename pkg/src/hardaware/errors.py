"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class LabelError(ValueError):
    """Label outside its declared domain (e.g. binary label not in {0, 1})."""


class FormatError(ValueError):
    """Malformed external file (wrong magic, truncation, count mismatch)."""


class NumericError(RuntimeError):
    """Numerical failure (non-finite loss, non-convergent eigensolve)."""


class OracleError(RuntimeError):
    """A verification oracle could not be evaluated (e.g. non-finite loss)."""
