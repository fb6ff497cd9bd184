"""Exception hierarchy shared by all modules."""


class LorentzGasError(Exception):
    """Base class for every error raised by this package."""


class DomainError(LorentzGasError, ValueError):
    """A parameter lies outside the region where the model is defined."""


class NumericalError(LorentzGasError, ArithmeticError):
    pass


class EscapeError(LorentzGasError):
    """A free flight ran past the flight cap without hitting a scatterer."""

    def __init__(self, tau_max, message=None):
        self.tau_max = tau_max
        super().__init__(message or f"no collision within tau_max={tau_max:g}")


class ResolutionError(LorentzGasError):
    """A requested cell is too thin to resolve at the current settings."""


class FitError(LorentzGasError):
    pass


class NotFound(LorentzGasError):
    pass


class ConstructionError(LorentzGasError):
    """A measure construction failed one of its validation conditions."""

    def __init__(self, condition, detail=""):
        self.condition = condition
        super().__init__(f"{condition}: {detail}" if detail else condition)


class NonTermination(LorentzGasError):
    pass
