"""Gaussian-process state-space models learned with particle Gibbs.

The transition function is a GP integrated out of the model; trajectories
are drawn with a conditional particle filter with ancestor sampling that
reuses Cholesky factors of the trajectory covariance.
"""

from .kernels import CovFunction, Hyperparameters, HyperPriors, LogNormalPrior, MeanFunction
from .model import Dataset, GpSsmModel, KnownSystem, MeasurementModel, simulate
from .gp_prior import TrajectoryFactor, log_joint_prior, one_step_predictive
from .fic import FicStates, InducingSet, select_inducing
from .smc import bootstrap_pf, cpf_as_sweep
from .pgas import ChainSample, PgasConfig, PgasError, chain_diagnostics, run_pgas

__version__ = "0.1.0"

__all__ = [
    "ChainSample", "CovFunction", "Dataset", "FicStates", "GpSsmModel", "HyperPriors",
    "Hyperparameters", "InducingSet", "KnownSystem", "LogNormalPrior", "MeanFunction",
    "MeasurementModel", "PgasConfig", "PgasError", "TrajectoryFactor", "bootstrap_pf",
    "chain_diagnostics", "cpf_as_sweep", "log_joint_prior", "one_step_predictive",
    "run_pgas", "select_inducing", "simulate",
]
