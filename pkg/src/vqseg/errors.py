"""Exception hierarchy.  ``exit_code`` is what the command line returns."""


class VQSegError(Exception):
    exit_code = 1


class ConfigError(VQSegError, ValueError):
    exit_code = 2


class DimensionError(VQSegError, ValueError):
    exit_code = 2


class DataError(VQSegError):
    exit_code = 3


class PreconditionError(DataError, ValueError):
    pass


class GraphError(VQSegError, RuntimeError):
    exit_code = 4


class NumericalError(VQSegError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class FormatError(VQSegError):
    exit_code = 5
