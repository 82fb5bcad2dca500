"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad input, exit code 2 on
the command line) and :class:`ConvergenceError` (numerical failure, exit
code 3).
"""


class StdMargError(Exception):
    """Base class for all package errors."""


class DataError(StdMargError, ValueError):
    pass


class ConvergenceError(StdMargError, RuntimeError):
    pass


class MissingColumn(DataError):
    pass


class NonNumericValue(DataError):
    pass


class MissingValue(DataError):
    pass


class NonPositiveFollowup(DataError):
    pass


class EmptyArm(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class InvalidFamilyData(DataError):
    pass


class InvalidModelSpec(DataError):
    pass


class RankDeficientDesign(DataError):
    pass


class NonPositiveEstimateForLogScale(DataError):
    pass


class OddBlockForProbabilities(DataError):
    pass


class InvalidConfig(DataError):
    pass


class NonConvergence(ConvergenceError):
    pass


class SeparationDetected(ConvergenceError):
    pass


class NotConverged(ConvergenceError):
    pass


class SingularBread(ConvergenceError):
    pass


class SimulationAborted(ConvergenceError):
    """Too many replicate-level fit failures."""
