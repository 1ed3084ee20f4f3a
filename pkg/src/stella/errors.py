"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions (shape, rank, range)."""


class NumericalError(RuntimeError):
    """A numerical routine failed to produce a trustworthy result."""


class SingularMatrixError(NumericalError):
    """Input is rank deficient where a full-rank matrix is required."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericalError):
    """A training run's loss blew past the divergence threshold.

    The partial history is kept on the exception for diagnosis.
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history or [])
