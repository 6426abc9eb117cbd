"""Exception hierarchy shared by all modules."""


class FBSDELabError(Exception):
    """Base class for every error raised by the package."""


class ModelError(FBSDELabError):
    pass


class InvalidInterval(ModelError, ValueError):
    pass


class MissingDerivatives(ModelError):
    """An operation needs a coefficient derivative the model does not supply."""


class SmoothnessViolation(ModelError):
    pass


class NumericalFailure(FBSDELabError):
    """Base for failures of a numerical scheme (CLI exit code 3)."""


class PicardDiverged(NumericalFailure):
    pass


class CFLViolation(NumericalFailure):
    pass


class MuSearchFailed(NumericalFailure):
    pass


class DegeneracyDetected(NumericalFailure):
    pass


class GridMismatch(FBSDELabError, ValueError):
    pass


class NotBrownian(FBSDELabError):
    """Time reversal / local-time decomposition requested on a drifted ensemble."""


class DegenerateBins(FBSDELabError):
    pass


class DensityError(FBSDELabError):
    pass


class TooFewSamples(DensityError):
    pass


class DegenerateSamples(DensityError):
    """All samples coincide, so no bandwidth can be chosen."""


class BadBounds(DensityError, ValueError):
    pass


class Degenerate(DensityError):
    """Hypotheses for a density bound fail (e.g. the gradient vanishes)."""


class MissingSecondDerivatives(DensityError):
    pass


class ConfigInvalid(FBSDELabError, ValueError):
    pass


class MissingReports(FBSDELabError):
    pass
