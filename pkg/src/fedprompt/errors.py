"""Exception taxonomy shared across the package."""


class FedPromptError(Exception):
    """Base class for all package errors."""


class ConfigError(FedPromptError):
    """Invalid configuration value, key, or shape declaration."""


class DomainError(FedPromptError):
    """Mathematically invalid input to a numeric operation."""


class DataError(FedPromptError):
    """Malformed, insufficient, or inconsistent dataset input."""


class AggregationError(FedPromptError):
    """Server-side aggregation violated its preconditions; round aborted."""


class EvaluationError(FedPromptError):
    """Metric computation received inputs it cannot score."""
