class EbtError(Exception):
    """Base class for every error raised by the ebt package."""


class ShapeError(EbtError, ValueError):
    """Two grids that must share a shape do not."""


class DimensionError(ShapeError):
    """A grid is empty or not two-dimensional."""


class UsageError(EbtError, ValueError):
    """Invalid arguments, empty inputs or misaligned data directories."""


class OracleSizeError(EbtError, ValueError):
    """Input too large for a brute-force test oracle."""


class NumericError(EbtError, ArithmeticError):
    """A non-finite value reached a numeric routine."""
