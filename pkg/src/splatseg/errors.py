"""Exception types shared across the package."""


class SplatsegError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplatsegError, ValueError):
    """An input violates a documented precondition (zero quaternion, bad config value, ...)."""


class ContractViolationError(SplatsegError, ValueError):
    """Mismatched shapes or inconsistent arguments between paired calls."""


class FormatError(SplatsegError, ValueError):
    """Malformed or truncated file content."""


class EmptySelectionError(SplatsegError, KeyError):
    """An instance id selected no Gaussians."""


class UndefinedInstanceError(SplatsegError, KeyError):
    """An operation referenced an instance with no members."""


class EmbeddingLookupError(SplatsegError, KeyError):
    """A precomputed embedding key is missing from a file-backed embedder."""


class TrainingDivergedError(SplatsegError, RuntimeError):
    """A non-finite loss was produced during optimization.

    Carries enough context to locate the offending step.
    """

    def __init__(self, iteration: int, view_id: int, term: str, value: float):
        self.iteration = iteration
        self.view_id = view_id
        self.term = term
        self.value = value
        super().__init__(
            f"non-finite loss term '{term}' ({value!r}) at iteration {iteration}, view {view_id}"
        )
