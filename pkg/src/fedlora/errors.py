"""Exceptions raised by fedlora."""

from typing import Optional


__all__ = [
    "FedLoraError",
    "ShapeError",
    "RankError",
    "NumericError",
    "InputError",
    "ScheduleError",
    "ConfigError",
    "AggregationError",
    "ProtocolError",
    "FramingError",
    "FedConnectionError",
    "RoundFailureError",
    "IdentityError",
    "LedgerError",
    "ExperimentError",
]


class FedLoraError(Exception):
    """Base class for all fedlora errors."""


class ShapeError(FedLoraError, ValueError):
    """Matrix or adapter shapes do not conform."""


class RankError(FedLoraError, ValueError):
    """A requested rank lies outside the admissible range."""


class NumericError(FedLoraError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite values."""

    def __init__(self, message: str, iterations: Optional[int] = None):
        super().__init__(message)
        self.iterations = iterations


class InputError(FedLoraError, ValueError):
    """Invalid input data (empty batches, out-of-vocabulary tokens, empty splits)."""


class ScheduleError(FedLoraError, RuntimeError):
    """The optimizer step budget is exhausted."""


class ConfigError(FedLoraError, ValueError):
    """An experiment or task configuration is invalid."""


class AggregationError(FedLoraError, ValueError):
    """Aggregation was asked to combine nothing."""


class ProtocolError(FedLoraError):
    """A message violates the federation protocol."""


class FramingError(ProtocolError):
    """A wire frame is truncated or its lengths are inconsistent."""


class FedConnectionError(FedLoraError, ConnectionError):
    """A transport failed while talking to a client."""

    def __init__(self, message: str, client_id: Optional[int] = None):
        super().__init__(message)
        self.client_id = client_id


class RoundFailureError(FedLoraError, RuntimeError):
    """No verified update reached the aggregator in a round."""

    def __init__(self, message: str, round: int, partial_result=None):
        super().__init__(message)
        self.round = round
        self.partial_result = partial_result


class IdentityError(FedLoraError):
    """A key is missing or a registry entry conflicts."""


class LedgerError(FedLoraError):
    """The reward ledger chain is broken."""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class ExperimentError(FedLoraError, RuntimeError):
    """A variant of an experiment failed."""

    def __init__(self, message: str, variant: Optional[str] = None, round: Optional[int] = None):
        super().__init__(message)
        self.variant = variant
        self.round = round
