"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class FeatureFileError(EngineError):
    """Base class for feature/checkpoint file problems."""


class FormatError(FeatureFileError):
    """File does not start with the expected magic/version."""


class CorruptionError(FeatureFileError):
    """File header is valid but the payload is truncated or inconsistent."""


class ValidationError(EngineError):
    """Data violates an invariant (non-finite entries, empty matrix, bad labels)."""


class NumericError(EngineError):
    """A computation produced non-finite values."""


class TrainingAbortedError(NumericError):
    """Training hit a non-finite loss; partial results are attached.

    Attributes
    ----------
    params : the parameters at the point of abort
    bank : checkpoint bank accumulated before the abort
    run : the (partial) training trace
    """

    def __init__(self, message, params=None, bank=None, run=None):
        super().__init__(message)
        self.params = params
        self.bank = bank
        self.run = run


class DegenerateNormalizerError(EngineError):
    """A checkpoint's features collapsed; its score normalizer is zero."""
