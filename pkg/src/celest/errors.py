"""Exception hierarchy shared by all celest modules."""


class CelestError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(CelestError, ValueError):
    """A configuration value or scenario description is invalid."""


class IngestionError(CelestError, OSError):
    """A log or model file could not be read."""


class ContractError(CelestError, ValueError):
    """A function precondition was violated (shape mismatch, empty input...)."""


class AggregationError(CelestError):
    """Federated aggregation cannot produce a model (e.g. zero total weight)."""


class InvestigationError(CelestError):
    """The DTrust server lacks the history needed to investigate a report."""
