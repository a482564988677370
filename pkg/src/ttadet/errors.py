"""Exception types shared across the package."""


class TtaDetError(Exception):
    """Base class for all package errors."""


class DimMismatch(TtaDetError, ValueError):
    pass


class EmptyOrSingleton(TtaDetError, ValueError):
    pass


class RateOverflow(TtaDetError, ValueError):
    pass


class NotSymmetric(TtaDetError, ValueError):
    pass


class NotPositiveDefinite(TtaDetError, ValueError):
    pass


class ShapeMismatch(TtaDetError, ValueError):
    pass


class NoProposals(TtaDetError, RuntimeError):
    pass


class PlacementFailure(TtaDetError, RuntimeError):
    pass
