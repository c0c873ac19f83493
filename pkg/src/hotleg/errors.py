"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class HotlegError(Exception):
    exit_code = 2
    kind = "error"


class UsageError(HotlegError):
    exit_code = 1
    kind = "usage"


class InvalidArgumentError(HotlegError, ValueError):
    kind = "invalid-argument"


class ConfigError(HotlegError, ValueError):
    kind = "config"


class ShapeError(HotlegError, ValueError):
    kind = "shape"


class InvalidStateError(HotlegError, RuntimeError):
    kind = "invalid-state"


class DegenerateChannelError(HotlegError, ValueError):
    kind = "degenerate-channel"


class CorruptionError(HotlegError, IOError):
    kind = "corruption"


class IngestionError(HotlegError, ValueError):
    kind = "ingestion"


class LeakageError(HotlegError, ValueError):
    kind = "test-leakage"


class CalibrationError(HotlegError, RuntimeError):
    kind = "calibration"

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


class UndefinedMetricError(HotlegError, ValueError):
    kind = "undefined-metric"


class NumericError(HotlegError, ArithmeticError):
    exit_code = 3
    kind = "numeric"


class DivergenceError(NumericError):
    kind = "divergence"

    def __init__(self, message, epoch=None, fold=None):
        super().__init__(message)
        self.epoch = epoch
        self.fold = fold


class SearchError(NumericError):
    kind = "search-failure"
