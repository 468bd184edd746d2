"""Exception hierarchy shared by all modules."""


class HolomorseError(Exception):
    """Base class for every error raised by the package."""


# geometry
class NonFreeAction(HolomorseError):
    pass


class ResolutionTooCoarse(HolomorseError):
    pass


class NonIntegralFlux(HolomorseError):
    pass


class UnsupportedField(HolomorseError):
    """Curvature field cannot be realised by plane-wise link phases."""


# pointwise spectra
class NotHermitian(HolomorseError):
    pass


class DegeneratePoint(HolomorseError):
    pass


class TruncationInsufficient(HolomorseError):
    pass


# operators
class InconsistentLinks(HolomorseError):
    pass


class NonHermitianPotential(HolomorseError):
    pass


class WidthTooSmall(HolomorseError):
    pass


# counting
class FactorizationBreakdown(HolomorseError):
    pass


class NoConvergence(HolomorseError):
    pass


class LambdaOnJump(HolomorseError):
    pass


# gamma dimensions
class NotAProjection(HolomorseError):
    pass


class LambdaOnSpectrumEdge(HolomorseError):
    pass


class FormBoundViolated(HolomorseError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NotAComplex(HolomorseError):
    pass


# harness
class InsufficientSeries(HolomorseError):
    pass


class ConfigError(HolomorseError):
    pass
