"""Exception hierarchy shared by all modules."""


class HsglrtError(Exception):
    """Base class for package errors."""


class ConfigError(HsglrtError, ValueError):
    """Invalid configuration or argument combination."""


class DataError(HsglrtError, ValueError):
    """Malformed or inconsistent input data (files, shapes, values)."""


class DomainError(HsglrtError, ValueError):
    """Abundances outside the admissible region."""


class SingularStatisticsError(HsglrtError, ArithmeticError):
    """Background scatter matrix is not (numerically) positive-definite.

    Usually means too few secondary pixels for the band count, or
    degenerate secondary data.
    """
