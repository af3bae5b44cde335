"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes, so each class carries ``exit_code``.
"""


class A2FPNError(Exception):
    exit_code = 1


class UsageError(A2FPNError):
    exit_code = 1


class ConfigurationError(A2FPNError, ValueError):
    exit_code = 1


class DimensionError(A2FPNError, ValueError):
    exit_code = 1


class TapeError(UsageError):
    """Raised on misuse of a differentiation tape (reuse after backward, non-scalar loss)."""


class DegenerateKernelError(A2FPNError, ArithmeticError):
    def __init__(self, row, denominator):
        super().__init__(
            f"attention denominator {denominator:.3e} at row {row} is below the degeneracy threshold"
        )
        self.row = row
        self.denominator = denominator


class DataError(A2FPNError, ValueError):
    exit_code = 2


class FormatError(DataError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class UndefinedMetricError(DataError):
    pass


class CapacityError(A2FPNError, MemoryError):
    exit_code = 1


class TrainingDivergenceError(A2FPNError, FloatingPointError):
    exit_code = 2

    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class PropertyFailure(A2FPNError):
    exit_code = 3
