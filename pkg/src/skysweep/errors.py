"""Exception hierarchy shared across the toolkit."""


class SkysweepError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveDepth(SkysweepError):
    pass


class DegenerateRays(SkysweepError):
    pass


class InsufficientMatches(SkysweepError):
    pass


class NoConsensus(SkysweepError):
    pass


class Collinear(SkysweepError):
    pass


class InvalidConfig(SkysweepError):
    pass


class SchemaMismatch(SkysweepError):
    pass


class BootstrapFailed(SkysweepError):
    pass


class InsufficientData(SkysweepError):
    pass


class EmptyIndex(SkysweepError):
    pass


class InconsistentMap(SkysweepError):
    pass


class NumericalFailure(SkysweepError):
    pass


class TargetMissing(SkysweepError):
    pass


class TableInfeasible(SkysweepError):
    pass


class UnknownId(SkysweepError):
    pass


class DecodeFailed(SkysweepError):
    pass


class InsufficientViews(SkysweepError):
    pass


class DegenerateGeometry(SkysweepError):
    pass


class InsufficientGCPs(SkysweepError):
    pass


class MissingGCPs(SkysweepError):
    pass


class EmptyCloud(SkysweepError):
    pass


class UnknownSession(SkysweepError):
    pass
