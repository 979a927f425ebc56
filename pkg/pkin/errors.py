"""Exception hierarchy. Every user-triggerable failure is a PkinError carrying the exit code the
command line reports for it."""

from typing import Optional


class PkinError(Exception):
    exit_code = 1


class ConfigurationError(PkinError):
    exit_code = 1


class GuardError(ConfigurationError):
    """Small-data threshold exceeded without an explicit override."""


class ArtifactMissingError(ConfigurationError):
    pass


class CacheError(PkinError):
    exit_code = 1


class DomainError(PkinError):
    exit_code = 1


class UsageError(PkinError):
    exit_code = 1


class DimensionError(PkinError):
    exit_code = 1


class InfiniteExitError(PkinError):
    exit_code = 1


class ConvergenceError(PkinError):
    exit_code = 2

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace


class AmplitudeGuardError(ConvergenceError):
    pass


class InvariantError(PkinError):
    exit_code = 3


class AssemblyError(InvariantError):
    def __init__(self, message: str, diagnostics: Optional[dict] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MassDriftError(InvariantError):
    pass


class NumericalBlowupError(InvariantError):
    def __init__(self, message: str, node: Optional[tuple] = None, t: Optional[float] = None):
        super().__init__(message)
        self.node = node
        self.t = t


class DegenerateCycleError(InvariantError):
    pass


class FitInvalidError(InvariantError):
    pass


class AuditFailure(InvariantError):
    pass
