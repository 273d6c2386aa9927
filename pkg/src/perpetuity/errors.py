"""Exception hierarchy.

Every error raised on purpose by the package derives from ``PerpetuityError`` so
that the command line can map it to exit code 1.
"""


class PerpetuityError(Exception):
    pass


class ModelError(PerpetuityError):
    """Malformed or non-finite model coefficients."""


class NotSPDError(ModelError):
    pass


class NotPositiveRecurrent(PerpetuityError):
    pass


class SpectrumError(PerpetuityError):
    pass


class ConvergenceError(PerpetuityError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DomainExit(PerpetuityError):
    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class DegeneracyError(PerpetuityError):
    pass


class ValidityError(PerpetuityError):
    pass


class SamplingError(PerpetuityError):
    pass


class NumericalRangeError(PerpetuityError):
    pass


class OracleValidationError(PerpetuityError):
    pass
