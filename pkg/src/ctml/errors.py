"""Exception hierarchy; the CLI maps these onto exit codes."""


class CTMLError(Exception):
    exit_code = 1


class ConfigurationError(CTMLError, ValueError):
    exit_code = 2


class DimensionError(CTMLError, ValueError):
    exit_code = 2


class InputError(CTMLError, ValueError):
    exit_code = 2


class UsageError(CTMLError, ValueError):
    exit_code = 2


class NumericalError(CTMLError, ArithmeticError):
    exit_code = 3


class FormatError(CTMLError, IOError):
    exit_code = 4


class TruncatedFileError(FormatError):
    """Payload shorter than the header promises."""

    def __init__(self, path, expected, actual):
        super().__init__(f"{path}: expected {expected} payload bytes, found {actual}")
        self.expected = expected
        self.actual = actual
