"""Exception hierarchy shared by every module."""


class RPOLabError(Exception):
    """Base class for all library errors."""


class InputError(RPOLabError, ValueError):
    """An argument is outside its admissible range (bad index, negative R, ...)."""


class ConfigurationError(RPOLabError, ValueError):
    """A structural object (instance, behavior law, config file) is malformed."""


class DomainError(RPOLabError, ValueError):
    """A policy leaves the support of the reference policy, or a log argument is zero."""


class SolverError(RPOLabError, RuntimeError):
    """An iterative solver hit its iteration cap or diverged."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class DivergenceError(SolverError):
    """Training produced a non-finite loss."""


class CertificationError(SolverError):
    """Maximin and minimax values disagree by more than the certified tolerance."""
