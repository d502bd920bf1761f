"""Exception types raised across the toolkit."""


class ClosureError(Exception):
    """Base class for all toolkit errors."""


class EvaluationError(ClosureError):
    """An observable or Hamiltonian produced a non-finite value."""


class UnsupportedSchemeError(ClosureError):
    """The requested integrator does not apply to this system."""


class SamplingError(ClosureError):
    """Sampler failure (non-finite energy, non-normalizable target, ...)."""


class LowOverlapError(ClosureError):
    """Reweighted batch fell below the effective-sample-size floor."""

    def __init__(self, message, ess=None, direction=None):
        super().__init__(message)
        self.ess = ess
        self.direction = direction


class DegenerateObservablesError(ClosureError):
    """Covariance of the resolved observables is (numerically) singular."""


class SingularityError(ClosureError):
    """Riccati matrix lost positive-definiteness during integration.

    Carries the trajectory computed up to the failure in ``prefix``.
    """

    def __init__(self, message, prefix=None, t=None):
        super().__init__(message)
        self.prefix = prefix
        self.t = t
        self.diagnostic = "possible dynamic phase transition"


class IntegrationError(ClosureError):
    """Adaptive integration failed; ``last_state`` holds the last good state."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class WrongRegimeError(ClosureError):
    """Operation requested outside its regime of validity."""


class DomainError(ClosureError):
    """Grid solver minimizer reached the domain boundary."""


class IntegrityError(ClosureError):
    """Resolved simulation failed an accuracy check (e.g. energy drift)."""


class ConfigError(ClosureError):
    """Experiment configuration failed validation."""
