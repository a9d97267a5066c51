"""Exception types raised across the workbench"""


class DKDError(Exception):
    """Base class for every workbench error"""


class ShapeMismatchError(DKDError, ValueError):
    """An op received inputs whose shapes it cannot combine"""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"{op}: {message}")


class GradientError(DKDError, RuntimeError):
    """Invalid use of the gradient tape or a non-finite gradient"""


class DivergenceError(DKDError, RuntimeError):
    """Training loss became NaN or infinite"""


class DatasetFormatError(DKDError, ValueError):
    """A dataset file does not follow its binary layout"""


class CheckpointError(DKDError, ValueError):
    """A checkpoint file is corrupt, truncated or of an unknown version"""


class SolverConvergenceError(DKDError, RuntimeError):
    """The SVM solver stopped before converging"""


class ConfigError(DKDError, ValueError):
    """An experiment configuration could not be loaded"""
