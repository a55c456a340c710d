"""Structured errors shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class DeconverError(Exception):
    exit_code = 2


# --- SHAPES AND OPERANDS ---

class ShapeMismatchError(DeconverError):
    def __init__(self, left, right, what="shape"):
        self.left = tuple(left)
        self.right = tuple(right)
        super().__init__(f"{what} mismatch: {self.left} vs {self.right}")


class ChannelMismatchError(DeconverError):
    def __init__(self, got, expected, what="input channels"):
        self.got = got
        self.expected = expected
        super().__init__(f"{what}: got {got}, expected {expected}")


class KernelError(DeconverError):
    pass


class StrideError(DeconverError):
    pass


class SpatialExtentError(DeconverError):
    pass


class DivisionByZeroError(DeconverError):
    def __init__(self, index):
        self.index = tuple(index)
        super().__init__(f"division by zero at index {self.index}")


class NegativeInputError(DeconverError):
    exit_code = 3

    def __init__(self, what, index, value):
        self.what = what
        self.index = tuple(index)
        self.value = value
        super().__init__(f"{what} violates its sign constraint at index {self.index} (value {value:.6g})")


class MaskError(DeconverError):
    pass


# --- CONFIG, IO, NUMERICS ---

class ConfigError(DeconverError):
    pass


class FormatError(DeconverError):
    pass


class GraphError(DeconverError):
    pass


class DivergenceError(DeconverError):
    exit_code = 4

    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"loss became non-finite at step {step}: {loss}")


class GradcheckError(DeconverError):
    exit_code = 1
