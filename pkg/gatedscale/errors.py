"""Exceptions raised by gatedscale. The CLI turns any of these into exit code 1."""


class GatedScaleError(Exception):
    """Root of every error raised by this package."""


class ShapeError(GatedScaleError, ValueError):
    """Tensor extents do not fit the operation."""


class TapeError(GatedScaleError, RuntimeError):
    """Backward was requested on something the tape cannot replay."""


class NumericError(GatedScaleError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(GatedScaleError, ValueError):
    """Invalid configuration key or value."""


class FormatError(GatedScaleError, ValueError):
    """A binary file does not follow the expected layout."""


class LabelError(GatedScaleError, ValueError):
    """A label or prediction map holds a class index outside the valid range."""
