"""Exception hierarchy shared by every subpackage."""


class CSFDAError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CSFDAError, ValueError):
    pass


class NonFiniteValue(CSFDAError, ArithmeticError):
    pass


class NotScalar(CSFDAError, ValueError):
    pass


class MissingGradient(CSFDAError, RuntimeError):
    pass


class ArchitectureMismatch(CSFDAError, ValueError):
    pass


class DegenerateSpec(CSFDAError, ValueError):
    pass


class EmptyBatch(CSFDAError, ValueError):
    pass


class EmptySet(CSFDAError, ValueError):
    pass


class BatchTooSmall(CSFDAError, ValueError):
    pass


class NonPositiveConfidence(CSFDAError, ValueError):
    pass


class DatasetMissing(CSFDAError, FileNotFoundError):
    pass


class DataFormatError(CSFDAError, ValueError):
    """A dataset or checkpoint file is malformed."""


class StreamExhausted(CSFDAError, RuntimeError):
    pass


class ConfigError(CSFDAError, ValueError):
    pass
