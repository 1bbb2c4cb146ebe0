"""Learned biased heteroscedastic error models for visual odometry.

Modules: ``geometry`` (SE(3) and error vectors), ``covariance`` (LDL and
Cholesky parameterizations), ``loss`` (Gaussian NLL and gradients),
``regressor`` (the estimator), ``synthetic`` (data with an exact oracle),
``metrics``, ``posegraph``, ``fileio``, ``config`` and ``cli``.
"""

from .covariance import CovarianceParams
from .exceptions import HetvoError
from .geometry import Pose, apply_correction, correction_target, exp_map, log_map
from .loss import GaussianPrediction, mean_log_likelihood, nll
from .metrics import Trajectory, ate, relative_segment_errors, report, sigma_coverage
from .posegraph import LMConfig, PoseGraph, build_graph, optimize
from .regressor import HeteroscedasticRegressor
from .synthetic import NoiseModelSpec, TrajectorySpec, gen_dataset

__version__ = "0.1.0"

__all__ = [
    "CovarianceParams",
    "GaussianPrediction",
    "HeteroscedasticRegressor",
    "HetvoError",
    "LMConfig",
    "NoiseModelSpec",
    "Pose",
    "PoseGraph",
    "Trajectory",
    "TrajectorySpec",
    "apply_correction",
    "ate",
    "build_graph",
    "correction_target",
    "exp_map",
    "gen_dataset",
    "log_map",
    "mean_log_likelihood",
    "nll",
    "optimize",
    "relative_segment_errors",
    "report",
    "sigma_coverage",
]
