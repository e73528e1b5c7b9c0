"""Exception types shared across the package."""


class YTowerError(Exception):
    """Base class for all package errors."""


class DomainError(YTowerError):
    """Point outside the map's phase-space chart, or invalid numeric input."""


class UnsupportedMapError(YTowerError):
    """Operation needs an analytic structure this map does not provide."""


class NotInComponentError(YTowerError):
    """Base parameter does not lie in any tracked component."""


class UndefinedStatisticError(YTowerError):
    """Statistic requested on a zero-mass or otherwise degenerate object."""


class ResourceBudgetError(YTowerError):
    """A refinement or vertex budget was exhausted."""


class NoBracketError(YTowerError):
    """Stable and unstable disks do not intersect within reach."""


class NoIntersectionError(NoBracketError):
    """Stable disk of a point misses the given unstable curve."""


class ContainmentError(YTowerError):
    """Subset argument is not contained where required."""


class PreconditionError(YTowerError):
    """Operation called with its documented preconditions violated."""


class SamplingError(YTowerError):
    """Attractor sampling produced no usable points."""


class NetCoverageError(YTowerError):
    """No net center within reach of a valid anchor point; net too coarse."""


class DegenerateSystemError(YTowerError):
    """No positive-mass strongly connected return system exists."""


class FitUndefinedError(YTowerError):
    """Too few nonzero histogram bins to fit a tail."""


class ConfigurationError(YTowerError):
    """Inconsistent or unsatisfiable run configuration."""


class NotApplicableError(YTowerError):
    """Query made for a point the operation is not defined on."""


class NotComparableError(YTowerError):
    """Two leaves do not share a stable family; holonomy undefined."""


class AssemblyError(YTowerError):
    """Product-structure assembly failed a witness check."""
