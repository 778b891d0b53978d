"""Exception hierarchy.

Every error derives from :class:`PathLossError`; input problems also derive
from :class:`ValueError` so callers that only know the builtin still catch them.
"""


class PathLossError(Exception):
    """Base class for all package errors."""


class InputError(PathLossError, ValueError):
    """Bad user input (schema, shapes, parameter ranges)."""


# campaign data
class MissingColumn(InputError):
    def __init__(self, name, detail=""):
        self.name = name
        msg = f"missing or ambiguous column {name!r}"
        super().__init__(msg + (f": {detail}" if detail else ""))


class EmptyFile(InputError):
    pass


class AllRowsDropped(PathLossError):
    pass


class DeviceTooSmall(InputError):
    def __init__(self, device_id, n):
        self.device_id = device_id
        super().__init__(f"device {device_id!r} has {n} records; need at least 2")


# features
class NonPositiveDistance(InputError):
    pass


class InconsistentFrequency(InputError):
    pass


# regression
class RankDeficient(PathLossError, ValueError):
    pass


class NotConverged(PathLossError, RuntimeError):
    pass


class SingularPrior(PathLossError, ValueError):
    pass


class SingularGram(PathLossError, ValueError):
    pass


class ColumnMismatch(InputError):
    pass


# cross validation
class DeviceSpanTooShort(InputError):
    def __init__(self, device_id, detail=""):
        self.device_id = device_id
        super().__init__(f"device {device_id!r} cannot be blocked: {detail}")


class ZeroVariance(PathLossError, ValueError):
    pass


class FoldError(PathLossError):
    """A model fit failed inside a cross-validation fold."""

    def __init__(self, fold, cause):
        self.fold = fold
        self.cause = cause
        super().__init__(f"fold {fold}: {type(cause).__name__}: {cause}")


# inference
class LeverageOne(PathLossError, ValueError):
    def __init__(self, row):
        self.row = row
        super().__init__(f"row {row} has leverage 1; HC3 undefined")


class PenalizedModelRejected(InputError):
    pass


class NotNested(InputError):
    pass


class PerfectCollinearity(PathLossError, ValueError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"column {column!r} is a perfect linear combination of the others")


# residual laws / diagnostics
class OptimizerDiverged(PathLossError, RuntimeError):
    pass


class DegenerateSample(InputError):
    pass


class EMNotConverged(PathLossError, RuntimeError):
    pass


class BandwidthNonPositive(InputError):
    pass


class AllBandwidthsDegenerate(PathLossError, ValueError):
    pass


class BisectionFailed(PathLossError, RuntimeError):
    pass


class GroupTooSmall(InputError):
    pass


# fade margin
class EmptySample(InputError):
    pass


class BracketFailure(PathLossError, RuntimeError):
    pass


class InsufficientReplicates(InputError):
    pass


class InvalidTruth(InputError):
    pass
