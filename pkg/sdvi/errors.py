"""
Exception hierarchy for the inference engine.

Expected outcomes (path deviations, inapplicable eliminations, exhausted
rejection samplers) are returned as values; these exceptions are reserved
for failures that abort an operation.
"""
from typing import Any, Optional


class SdviError(Exception):
    """Base class for all engine errors."""


class ConfigurationError(SdviError):
    """Invalid parameters, configs or distribution arguments."""


class DiscoveryError(SdviError):
    """Prior simulation produced no usable trace."""


class InitializationError(SdviError):
    """A local guide could not be initialized from prior samples."""

    def __init__(self, message: str, slp_index: Optional[int] = None):
        super().__init__(message)
        self.slp_index = slp_index


class InferenceError(SdviError):
    """Inference produced no usable result (e.g. every local ELBO is -inf)."""


class EstimatorSelectionError(SdviError):
    """A gradient estimator was requested for an unsupported family."""


class ModelDomainError(SdviError):
    """A model evaluation hit an invalid numeric domain; the trace is aborted."""

    def __init__(self, message: str, address: Optional[Any] = None):
        super().__init__(message)
        self.address = address


class RejectionExhaustedError(SdviError):
    """The truncated guide of an SLP rejected every proposal."""

    def __init__(self, slp_index: int, attempts: int):
        super().__init__(f"SLP {slp_index}: no accepted proposal after {attempts} attempts")
        self.slp_index = slp_index
        self.attempts = attempts
