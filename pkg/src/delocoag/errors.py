"""Exception hierarchy shared by all modules."""


class DelocoagError(Exception):
    """Base class for errors raised by this package."""


class FieldEvaluationError(DelocoagError):
    """The velocity field returned a non-finite value."""


class IntegrationBudgetError(DelocoagError):
    """A characteristic needed more integrator steps than the hard budget."""


class FlowAssumptionViolation(DelocoagError):
    """The flow violates a structural assumption (residence time, inflow sign...)."""


class CertificationError(DelocoagError):
    """A sampled value exceeded a declared bound."""


class ModelError(DelocoagError):
    """A model definition is inconsistent (e.g. negative intensity)."""


class RepresentationError(DelocoagError):
    """The operation is not defined for this measure representation."""


class NoConvergenceError(DelocoagError):
    """Picard iteration did not reach the tolerance within the iteration cap."""

    def __init__(self, message, last_ratio=float("nan")):
        super().__init__(message)
        self.last_ratio = last_ratio


class ContainmentError(DelocoagError):
    """An iterate left the ball of radius M during a Picard window."""


class ScaleError(DelocoagError):
    """Event rates in the particle system cannot be represented."""


class NotApplicable(DelocoagError):
    """A verification check does not apply to the given configuration."""


class ConfigError(DelocoagError):
    """Scenario configuration is malformed; ``line`` points into the file if known."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        if self.line is not None:
            return f"line {self.line}: {msg}"
        return msg


class NonContractiveWarning(UserWarning):
    """Coagulation substep is large compared with the generator norm bound."""
