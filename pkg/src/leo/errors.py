"""Exception types shared across the package."""


class LeoError(Exception):
    pass


class ConfigurationError(LeoError, KeyError):
    """A factor refers to a noise block or condition label theta does not define."""

    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class GaugeError(LeoError):
    """The linear system is rank deficient (the graph is not fully constrained)."""


class DivergenceError(LeoError):
    """Energy could not be decreased even with heavy damping.

    ``best`` carries the lowest-energy iterate seen, ``energy`` its energy.
    """

    def __init__(self, message, best=None, energy=None):
        super().__init__(message)
        self.best = best
        self.energy = energy


class StaleLinearizationError(LeoError):
    """Sampling was requested from a posterior that did not converge."""


class TuningError(LeoError):
    """HMC step-size adaptation failed to reach a usable acceptance rate."""


class TrainingAbort(LeoError):
    """Every episode in an epoch failed; carries the partial log."""

    def __init__(self, message, log=None):
        super().__init__(message)
        self.log = log
