"""Learning factor-graph observation models with a Gauss-Newton optimizer in the loop.

Submodules: ``manifold`` (SE(2)), ``graph`` (factor graphs, solver, sampling),
``models`` (learnable covariances), ``learning`` (the LEO trainer),
``baselines``, ``navsim`` (synthetic navigation data), ``toy1d``, ``hmc``
and ``cli``.
"""

from .errors import (
    ConfigurationError,
    DivergenceError,
    GaugeError,
    LeoError,
    StaleLinearizationError,
    TrainingAbort,
    TuningError,
)
from .graph import FactorGraph, GaussianPosterior, SolverConfig, sample_posterior, solve_gn, solve_incremental
from .learning import Example, LeoConfig, TrainLog, evaluate, leo_gradient, train
from .manifold import Pose2
from .models import CovBlock, CovMode, ThetaGrad, ThetaParams, energy_grad_theta

__version__ = "0.1.0"
