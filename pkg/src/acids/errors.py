"""Exception hierarchy shared by every acids module."""


class AcidsError(Exception):
    """Base class for all errors raised by the package."""


class ShapeMismatch(AcidsError, ValueError):
    pass


class EmptyBatch(AcidsError, ValueError):
    pass


class EmptyDomain(AcidsError, ValueError):
    pass


class EmptyInput(AcidsError, ValueError):
    pass


class LabelOutOfRange(AcidsError, ValueError):
    pass


class InvalidConfig(AcidsError, ValueError):
    pass


class InvalidSpec(AcidsError, ValueError):
    pass


class UnknownDomain(AcidsError, KeyError):
    pass


class DuplicateDomain(AcidsError, ValueError):
    pass


class CapacityExceeded(AcidsError, ValueError):
    pass


class BatchTooSmall(AcidsError, ValueError):
    pass


class EmptyStream(AcidsError, ValueError):
    pass


class GraphConsumed(AcidsError, RuntimeError):
    pass


class Exhausted(AcidsError, RuntimeError):
    pass


class FractionTooSmall(AcidsError, ValueError):
    pass


class MissingDomainBatch(AcidsError, ValueError):
    pass


class IncompatibleCheckpoint(AcidsError, ValueError):
    pass


class NonFiniteLoss(AcidsError, FloatingPointError):
    """Raised when a training or adaptation loss stops being finite.

    ``dump_path`` points at the saved joint matrices when a dump was written.
    """

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class ContractViolation(AcidsError, PermissionError):
    """A component touched data it is not allowed to see.

    Raised for sealed-label access outside the evaluator and for source data
    reaching the target adapter.
    """
