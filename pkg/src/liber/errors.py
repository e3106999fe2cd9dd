"""Exception hierarchy shared across the package."""

from __future__ import annotations


class LiberError(Exception):
    """Base class for all package errors."""


class IdentityError(LiberError, ValueError):
    """A behavior was routed to the state of a different user."""


class DegenerateInputError(LiberError, ValueError):
    """Input is empty or otherwise too small for the operation."""


class DimensionError(LiberError, ValueError):
    """Vector or matrix shapes do not agree."""


class PreconditionError(LiberError, ValueError):
    """An argument violates a documented precondition."""


class ImmutableRecordError(LiberError):
    """Attempt to overwrite a sealed partition or a stored representation."""


class UndefinedMetricError(LiberError, ValueError):
    """Metric is undefined for the given labels (empty or single-class)."""


class TrainingError(LiberError, RuntimeError):
    """Training diverged (non-finite loss)."""


class ConfigError(LiberError, ValueError):
    """Invalid run configuration."""


class DataError(LiberError, ValueError):
    """Malformed or empty input data."""


class ClientError(LiberError):
    """Failure talking to a language-model or embedding backend."""


class TransportError(ClientError):
    """Network-level or server-side failure; safe to retry."""


class RetryableClientError(ClientError):
    """Retries were exhausted; carries the prompt so the call can be replayed."""

    def __init__(self, message: str, prompt: str | None = None):
        super().__init__(message)
        self.prompt = prompt


class ProtocolError(ClientError):
    """Backend answered, but the answer is unusable (empty text, bad shape)."""
