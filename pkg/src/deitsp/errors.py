"""Exception hierarchy shared across the package.

CLI exit codes are attached to the classes so the command layer can map any
failure to a machine-readable status without a lookup table.
"""


class DeitspError(Exception):
    exit_code = 1


class InputError(DeitspError, ValueError):
    """Invalid argument supplied to a library call."""

    exit_code = 2


class ConfigError(DeitspError, ValueError):
    exit_code = 2


class ShapeError(InputError):
    pass


class ParseError(DeitspError, ValueError):
    exit_code = 3

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnsupportedFormatError(ParseError):
    pass


class SizeError(DeitspError, ValueError):
    """Instance size outside the range an operation supports."""

    exit_code = 4


class TrainingError(DeitspError, ArithmeticError):
    """Non-finite values surfaced during optimisation."""

    exit_code = 5
