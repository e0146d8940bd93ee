"""Exception types raised across the package."""


class InvalidSplitError(ValueError):
    """Raised when a sample cannot be partitioned into the requested folds."""


class RankDeficiencyError(ValueError):
    """Raised when a GLM has more coefficients than positively weighted rows."""


class LearnerTrainingError(RuntimeError):
    """A learner could not be trained on the given data.

    Callers usually respond by falling back to ``constant_rate``.
    """


class DegenerateEstimationError(RuntimeError):
    """A fold lacks the observations needed to define the estimand's sample analogue."""

    def __init__(self, message, fold=None):
        super().__init__(message)
        self.fold = fold


class TargetingDegenerateError(DegenerateEstimationError):
    """The targeting regression for a fold has no usable observations."""


class SummaryError(RuntimeError):
    """No repetitions are left to summarize."""


class ConfigError(ValueError):
    """Invalid run configuration; ``key`` holds the dotted path of the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key
