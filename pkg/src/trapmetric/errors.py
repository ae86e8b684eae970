"""Exception hierarchy shared by all trapmetric modules."""


class TrapMetricError(Exception):
    """Base class for every error raised deliberately by trapmetric."""


# robust fitting
class RobustFitError(TrapMetricError):
    pass


class DegenerateInput(RobustFitError):
    """Fewer than two samples, or no spread in x."""


class NoConsensus(RobustFitError):
    """Best hypothesis has too few inliers.

    ``fit`` holds the best available model (or None when there was not
    enough scene evidence to build one) so callers may still use it when
    forced.
    """

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


# calibration
class CalibrationError(TrapMetricError):
    pass


class TooFewReferences(CalibrationError):
    pass


class CalibrationDegenerate(CalibrationError):
    """Landmarks sit at (almost) the same aligned disparity."""


class EmptyMask(CalibrationError):
    pass


class DimensionMismatch(TrapMetricError, ValueError):
    pass


class CalibrationMissing(TrapMetricError):
    pass


# estimation / metrics
class EmptyBox(TrapMetricError):
    pass


class EmptyInput(TrapMetricError, ValueError):
    pass


# io
class ParseError(TrapMetricError, ValueError):
    pass


class SchemaError(ParseError):
    pass


class MissingColumn(ParseError):
    pass


class InvalidCrop(TrapMetricError, ValueError):
    pass


# simulator
class SpecError(TrapMetricError, ValueError):
    pass
