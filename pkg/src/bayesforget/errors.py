"""Exception hierarchy shared by all modules."""


class BayesForgetError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(BayesForgetError, ValueError):
    pass


class IndexOutOfRange(BayesForgetError, IndexError):
    pass


class IndexAlreadyRemoved(BayesForgetError, ValueError):
    pass


class OracleFailure(BayesForgetError):
    """A dense reference computation could not be carried out (e.g. non-SPD input)."""


class DegenerateCurvature(BayesForgetError, FloatingPointError):
    pass


class TrainingDiverged(BayesForgetError, FloatingPointError):
    pass


class ChainDiverged(BayesForgetError, FloatingPointError):
    pass


class SpectralBoundViolated(BayesForgetError):
    """The scaled curvature operator has norm above the tolerated bound."""


class NeumannDiverged(BayesForgetError, FloatingPointError):
    pass


class StationarityViolated(BayesForgetError):
    """Influence was requested at a point that is not (interior) stationary."""


class BoundsViolated(BayesForgetError, ValueError):
    """Variational scales outside [sigma_min, sigma_max] or other domain errors."""


class EmptyActiveSet(BayesForgetError, ValueError):
    pass


class MixedTargets(BayesForgetError, ValueError):
    pass


class ConfigError(BayesForgetError, ValueError):
    pass
