"""Exception hierarchy shared by every module in the package."""


class FedSemiError(Exception):
    """Base class for all errors raised by fedsemi."""


class ConfigurationError(FedSemiError, ValueError):
    """Invalid architecture, partition spec, training config or experiment config."""


class ShapeError(FedSemiError, ValueError):
    pass


class DataError(FedSemiError, ValueError):
    pass


class NumericalError(FedSemiError, ArithmeticError):
    """A non-finite value reached a place where it would corrupt parameters."""


class PartitionError(FedSemiError, RuntimeError):
    pass


class AlignmentError(FedSemiError, ValueError):
    """Feature dictionary and client data disagree in length."""


class AggregationError(FedSemiError, ValueError):
    pass
