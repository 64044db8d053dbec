"""Shared exception and warning types."""


class DimensionError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class InputError(ValueError):
    """Input data violates a precondition (NaN/Inf, empty dataset, ...)."""


class ConfigError(ValueError):
    """Run configuration or artifact wiring is inconsistent."""


class UndefinedSimilarityError(ValueError):
    """Cosine similarity requested against a zero vector."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ArchiveError(ValueError):
    """Tensor archive is malformed or internally inconsistent."""


class DegenerateTrainingWarning(UserWarning):
    """Gate training saw a single-class layer; parameters pinned to prior."""


class EmptyExitSetWarning(UserWarning):
    """Pathological-layer pruning removed every exit candidate."""
