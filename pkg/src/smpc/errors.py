"""Exception types raised across the package."""


class SMPCError(Exception):
    """Base class for all package errors."""


class ParameterError(SMPCError, ValueError):
    """An argument lies outside its admissible domain."""


class UnsupportedDistributionError(SMPCError):
    pass


class FamilyMismatchError(SMPCError):
    """A quadrature family does not match the marginal distribution."""


class UnsupportedBasisError(SMPCError):
    pass


class IndefiniteCovarianceError(SMPCError, ValueError):
    def __init__(self, message, min_pivot=None):
        super().__init__(message)
        self.min_pivot = min_pivot


class IndefiniteGramError(SMPCError, ValueError):
    pass


class MissingDerivativeError(SMPCError):
    pass


class PropagationError(SMPCError):
    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class ApproximationInvalidError(SMPCError, ValueError):
    """The normal approximation of the sample proportion is not valid."""


class UnsupportedWienerError(SMPCError):
    pass


class UnsupportedGPError(SMPCError):
    pass


class IntegrationError(SMPCError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class FilterError(SMPCError):
    pass


class ConfigurationError(SMPCError, ValueError):
    pass


class SolverError(SMPCError):
    pass
