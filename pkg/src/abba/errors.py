"""Exception types shared across the package."""


class AbbaError(Exception):
    pass


class ShapeError(AbbaError, ValueError):
    pass


class ParameterError(AbbaError, ValueError):
    pass


class DomainError(AbbaError, ValueError):
    """Input lies outside the domain where a closed form is defined."""


class NumericError(AbbaError, ArithmeticError):
    """A loss or gradient became non-finite."""


class FormatError(AbbaError, ValueError):
    """A file does not follow the expected binary or text layout."""


class DataFileError(AbbaError, OSError):
    """A data file is missing or shorter than its header promises."""
