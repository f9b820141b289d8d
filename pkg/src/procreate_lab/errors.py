class ProcreateError(Exception):
    pass


class ParameterError(ProcreateError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigurationError(ProcreateError):
    """A run configuration is invalid; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EvaluationError(ProcreateError, FloatingPointError):
    """A differentiable program produced a non-finite intermediate."""

    def __init__(self, primitive: str, message: str = "non-finite value"):
        super().__init__(f"{primitive}: {message}")
        self.primitive = primitive


class QueryError(ProcreateError, LookupError):
    pass


class DegenerateSimilarityWarning(UserWarning):
    """Cosine similarity evaluated with a (near-)zero vector; result set to 0."""
