"""Exception hierarchy shared across the package."""


class CALRError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CALRError, ValueError):
    pass


class RankError(CALRError, ValueError):
    pass


class SvdConvergenceError(CALRError, ArithmeticError):
    def __init__(self, residual: float, sweeps: int):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(
            f"Jacobi SVD did not converge after {sweeps} sweeps "
            f"(max off-diagonal coupling {residual:.3e})"
        )


class ZeroNormError(CALRError, ValueError):
    pass


class TokenRangeError(CALRError, ValueError):
    pass


class CorpusTooSmallError(CALRError, ValueError):
    pass


class CheckpointError(CALRError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedTensorError(CheckpointError):
    def __init__(self, tensor_name: str, expected: int, got: int):
        self.tensor_name = tensor_name
        super().__init__(
            f"tensor {tensor_name!r} is truncated: expected {expected} bytes, got {got}"
        )


class GraphConsumedError(CALRError, RuntimeError):
    pass


class MissingGradientError(CALRError, RuntimeError):
    pass


class TrainingDivergedError(CALRError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")


class BenchmarkError(CALRError, ValueError):
    pass
