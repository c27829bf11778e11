"""Exception hierarchy shared by every memgat module."""


class MemGatError(Exception):
    """Base class for all errors raised by memgat."""


class DimensionError(MemGatError, ValueError):
    pass


class ShapeError(MemGatError, ValueError):
    pass


class ParameterError(MemGatError, ValueError):
    pass


class VocabularyError(MemGatError, IndexError):
    pass


class DegenerateBatchError(MemGatError, ValueError):
    pass


class DeterminismError(MemGatError, RuntimeError):
    pass


class OptimizerError(MemGatError, RuntimeError):
    pass


class MaskingError(MemGatError, ValueError):
    pass


class LengthError(MemGatError, ValueError):
    pass


class ProtocolError(MemGatError, ValueError):
    pass


class DistributionError(MemGatError, ValueError):
    pass


class ConfigError(MemGatError, ValueError):
    pass


class IngestionError(MemGatError, ValueError):
    pass


class QueryError(MemGatError, ValueError):
    pass


class ResolutionError(MemGatError, LookupError):
    pass


class AlignmentError(MemGatError, ValueError):
    pass


class CompatibilityError(MemGatError, ValueError):
    pass
