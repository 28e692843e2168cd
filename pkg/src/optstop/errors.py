"""Exception hierarchy shared by the solver modules and the CLI."""


class OptStopError(Exception):
    """Base class; carries an optional diagnostics dict."""

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class ValidationError(OptStopError):
    """Model or reward rejected by the standing assumptions."""


class ConfigError(OptStopError):
    """Inconsistent or malformed job configuration."""


class DomainError(OptStopError, ValueError):
    """Evaluation outside the truncated state space."""


class NumericalFailure(OptStopError):
    """A root, bracket or integration step could not be completed."""


class QualityFailure(NumericalFailure):
    """Result computed but an internal consistency check is out of tolerance."""


class PreconditionError(OptStopError):
    """A solver was called on inputs that violate its hypotheses."""


class UnboundedValue(OptStopError):
    """The value function is identically +inf."""
