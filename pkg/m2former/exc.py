class M2FormerError(Exception):
    pass


class ShapeError(M2FormerError, ValueError):
    pass


class NonFiniteError(M2FormerError, ArithmeticError):
    def __init__(self, message: str, step: int = None):
        super().__init__(message)
        self.step = step


class SignalPowerError(M2FormerError):
    pass


class RecordingTooShortError(M2FormerError, ValueError):
    pass


class ClusteringError(M2FormerError):
    pass


class IfsdError(M2FormerError, ValueError):
    pass


class AlignmentError(M2FormerError, ValueError):
    pass


class PermutationError(M2FormerError, ValueError):
    pass


class ConfigError(M2FormerError, ValueError):
    pass


class CheckpointError(M2FormerError):
    pass
