"""Exception hierarchy shared by every module."""


class ModeSleuthError(Exception):
    """Base class for all library errors."""


class InvalidInput(ModeSleuthError, ValueError):
    pass


class UnstableSystem(ModeSleuthError, ValueError):
    pass


class NotPsd(ModeSleuthError, ValueError):
    pass


class SpectrumOverlap(ModeSleuthError, ValueError):
    """Raised when a Sylvester equation has no unique solution."""


class DegenerateRates(ModeSleuthError, ValueError):
    pass


class InvalidTimes(ModeSleuthError, ValueError):
    pass


class InvalidScheme(ModeSleuthError, ValueError):
    pass


class SingularInnovation(ModeSleuthError, ArithmeticError):
    pass


class NoConvergence(ModeSleuthError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NoEquilibrium(ModeSleuthError, RuntimeError):
    pass


class InvalidTree(ModeSleuthError, ValueError):
    pass


class InvalidGraph(ModeSleuthError, ValueError):
    pass


class NonUniform(ModeSleuthError, ValueError):
    pass


class InsufficientBand(ModeSleuthError, ValueError):
    pass
