"""Exception hierarchy shared by every module of the package."""


class TSLNError(Exception):
    """Base class for all errors raised by tsln."""


class ConfigError(TSLNError, ValueError):
    pass


# spatial graph
class UnknownArea(TSLNError, KeyError):
    pass


class DuplicateAreaId(TSLNError, ValueError):
    pass


class StillDisconnected(TSLNError, ValueError):
    pass


class IsolatedNode(TSLNError, ValueError):
    pass


class NumericalFailure(TSLNError, ArithmeticError):
    pass


class DisconnectedGraph(TSLNError, ValueError):
    pass


# survey / direct estimation
class EmptyArea(TSLNError, ValueError):
    pass


class UnknownPopulation(TSLNError, ValueError):
    pass


class EmptyGroup(TSLNError, ValueError):
    pass


class ZeroPoint(TSLNError, ZeroDivisionError):
    pass


# inference engine
class DimensionMismatch(TSLNError, ValueError):
    pass


class NonFiniteDensity(TSLNError, FloatingPointError):
    pass


class NonFiniteAtInit(NonFiniteDensity):
    pass


class AllDivergent(TSLNError, RuntimeError):
    pass


class TooFewDraws(TSLNError, ValueError):
    pass


class TooFewSamples(TSLNError, ValueError):
    pass


# model fitting
class RankDeficientDesign(TSLNError, ValueError):
    pass


class DivergentChains(TSLNError, RuntimeError):
    pass


class DegenerateProportion(TSLNError, ValueError):
    pass


class NoStableAreas(TSLNError, ValueError):
    pass


class TooFewStableAreas(TSLNError, ValueError):
    pass


class MissingSummary(TSLNError, KeyError):
    pass


class NonPositiveVariance(TSLNError, ValueError):
    pass


# summaries and evaluation
class DegenerateNational(TSLNError, ValueError):
    pass


class DrawCountMismatch(TSLNError, ValueError):
    pass


class DiagnosticsFailed(TSLNError, RuntimeError):
    pass


class SampleExceedsPopulation(TSLNError, ValueError):
    pass


class ZeroTruth(TSLNError, ValueError):
    pass
