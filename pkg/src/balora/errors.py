"""Exception types shared across the package."""


class BaloraError(Exception):
    """Base class for all errors raised by balora."""


class NonFinite(BaloraError, ValueError):
    pass


class NoConvergence(BaloraError, ArithmeticError):
    pass


class TooFewSamples(BaloraError, ValueError):
    pass


class ShapeMismatch(BaloraError, ValueError):
    pass


class DomainError(BaloraError, ValueError):
    pass


class NotScalarLoss(BaloraError, ValueError):
    pass


class RankTooLarge(BaloraError, ValueError):
    pass


class ZeroMatrix(BaloraError, ValueError):
    pass


class NotDistribution(BaloraError, ValueError):
    pass


class ConfigInvalid(BaloraError, ValueError):
    pass


class CheckpointError(BaloraError, ValueError):
    pass
