"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Tensor shapes are inconsistent with the model architecture."""


class VocabularyError(ValueError):
    """A token is not part of the closed caption vocabulary."""

    def __init__(self, token: str):
        self.token = token
        super().__init__(f"token {token!r} is not in the caption vocabulary")


class NotTrainedError(RuntimeError):
    """A component was used before it was trained or loaded."""


class ConvergenceError(RuntimeError):
    """A training run finished its budget without meeting its quality gate.

    Carries the loss curve / metrics of the failed run so callers can report it.
    """

    def __init__(self, message: str, result=None):
        self.result = result
        super().__init__(message)


class ProbeDivergenceError(RuntimeError):
    """Latent probe optimization produced non-finite values."""
