"""Exception types raised across the package."""


class UnpadError(ValueError):
    """Base class for invalid inputs to any planner or reference kernel."""


class InvalidInputError(UnpadError):
    pass


class InvalidMaskError(UnpadError):
    """A mask row is not a prefix of ones followed by zeros."""


class CapacityError(UnpadError):
    """A sequence does not fit in the requested padded length."""


class CoverageError(UnpadError):
    """A length falls outside every bucket of a bucket set."""


class AllGatherShapeError(UnpadError):
    """Workers hold different sample counts, so an all-gather is impossible."""


class SlicingError(UnpadError):
    pass


class BoundNotApplicableError(UnpadError):
    """The steady-state prefetch precondition does not hold."""


class PackingError(UnpadError):
    pass


class NumericDomainError(UnpadError):
    pass


class AmbiguousFusionError(UnpadError):
    """Two fusion rules claimed the same primitive kernel."""
