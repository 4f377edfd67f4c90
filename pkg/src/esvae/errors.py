"""Exception hierarchy shared by all esvae modules."""


class ESVAEError(Exception):
    """Base class for library errors."""


class InvalidInputError(ESVAEError, ValueError):
    """Input is malformed: wrong shape, non-finite values, bad parameters."""


class DimensionMismatchError(InvalidInputError):
    pass


class DegenerateConfigurationError(ESVAEError, ValueError):
    """All landmarks coincide after centering; the shape is undefined."""


class InjectivityRadiusError(ESVAEError, ValueError):
    """A tangent vector is too long for the exponential map to be injective."""

    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class AntipodalPointsError(ESVAEError, ValueError):
    """The logarithm map or transport is undefined between (near-)antipodal points."""

    def __init__(self, message, trajectory=None, frame=None):
        super().__init__(message)
        self.trajectory = trajectory
        self.frame = frame


class TrainingDivergenceError(ESVAEError, FloatingPointError):
    """Non-finite loss during training."""

    def __init__(self, message, batch_index=None, history=None, params=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.history = history
        self.params = params


class UndefinedMetricError(ESVAEError, ValueError):
    pass


class UnstableCIError(ESVAEError, RuntimeError):
    pass


class DataFormatError(ESVAEError, ValueError):
    """A sequence file violates the documented format."""


class RaggedDataError(DataFormatError):
    pass


class ConfigError(ESVAEError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class FormatVersionError(ESVAEError, ValueError):
    pass


class EmptyFoldError(ESVAEError, ValueError):
    pass
