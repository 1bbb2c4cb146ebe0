"""Synthetic driving trajectories with biased heteroscedastic VO noise.

Every generated sample keeps the exact Gaussian it was drawn from, so the
generator doubles as an oracle for likelihood and calibration checks.

Features per step are ``[speed, heading_rate, texture, rho_x, rho_y, rho_z,
phi_x, phi_y, phi_z]`` where ``(rho, phi)`` is the ground-truth relative
twist and ``texture`` in ``[0, 1]`` is a seeded stand-in for image quality.
In the camera frame (x right, y down, z forward) the vehicle heading turns
about the y axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import covariance as cov
from .exceptions import MissingOracle
from .geometry import (
    Pose,
    compose,
    correction_target,
    error_vector_to_pose,
    exp_map,
    integrate,
    inverse,
    log_map,
    pose_to_error_vector,
    vo_error,
)
from .loss import GaussianPrediction, mean_log_likelihood
from .regressor import ErrorSample

FEATURE_NAMES = ("speed", "heading_rate", "texture", "rho_x", "rho_y", "rho_z", "phi_x", "phi_y", "phi_z")
FEATURE_DIM = len(FEATURE_NAMES)
NOISE_KINDS = ("constant", "linear", "smooth-nonlinear")
ERROR_MODES = ("right", "left")


@dataclass
class TrajectorySpec:
    length: int = 1000
    speed_range: tuple = (0.5, 2.0)
    speed_step_std: float = 0.05
    heading_rate_std: float = 0.004
    heading_rate_max: float = 0.05
    tilt_std: float = 0.002
    tilt_reversion: float = 0.3
    constant_speed: float | None = None
    constant_heading_rate: float | None = None
    texture_step_std: float = 0.08

    def __post_init__(self):
        if self.length < 2:
            raise ValueError("trajectory length must be >= 2")
        lo, hi = self.speed_range
        if not 0 < lo <= hi:
            raise ValueError("speed_range must satisfy 0 < low <= high")


def _motion_twists(spec: TrajectorySpec, rng):
    n = spec.length - 1
    lo, hi = spec.speed_range
    twists = np.zeros((n, 6))
    speed = rng.uniform(lo, hi) if spec.constant_speed is None else spec.constant_speed
    omega = 0.0 if spec.constant_heading_rate is None else spec.constant_heading_rate
    tilt = np.zeros(2)
    for i in range(n):
        if spec.constant_speed is None:
            speed = float(np.clip(speed + spec.speed_step_std * rng.normal(), lo, hi))
        if spec.constant_heading_rate is None:
            omega = float(np.clip(omega + spec.heading_rate_std * rng.normal(), -spec.heading_rate_max, spec.heading_rate_max))
        if spec.tilt_std > 0:
            tilt = (1.0 - spec.tilt_reversion) * tilt + spec.tilt_std * rng.normal(size=2)
        twists[i] = (0.0, 0.0, speed, tilt[0], omega, tilt[1])
    return twists


def gen_trajectory(spec: TrajectorySpec, seed) -> list:
    """Absolute ground-truth poses of a smooth vehicle-like path."""
    rng = np.random.default_rng(seed)
    return integrate([exp_map(xi) for xi in _motion_twists(spec, rng)])


def texture_process(n, rng, step_std=0.25):
    """Image-quality proxy in ``[0, 1]``, mostly good with occasional poor spells.

    ``1 - u**3`` of a reflected random walk ``u``.
    """
    q = np.empty(n)
    cur = rng.uniform(0.2, 0.8)
    for i in range(n):
        cur += step_std * rng.normal()
        cur = abs(cur)
        if cur > 1.0:
            cur = 2.0 - cur
        q[i] = cur
    return 1.0 - q**3


def features_from_motion(gt_relative, texture):
    twists = np.array([log_map(T) for T in gt_relative])
    speed = np.linalg.norm(np.array([T.translation for T in gt_relative]), axis=1)
    return np.column_stack([speed, twists[:, 4], texture, twists])


def _default_arrays():
    d = dict(
        mean_offset=[0.03, -0.02, 0.02, 3.0e-3, 3.0e-3, -3.0e-3],
        # columns: speed, heading rate, texture basis terms
        mean_coeffs=[
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.013, 0.0, 0.0],
            [0.0, 0.0, 0.0],
            [0.0, 4.0e-4, 0.0],
            [0.0, 0.0, 0.0],
        ],
        # rotation log-variances stay inside the +-12 clamp over the feature range
        logvar_offset=[-5.5, -6.0, -5.0, -10.0, -9.8, -10.1],
        logvar_coeffs=[
            [0.6, 0.0, -4.0],
            [0.4, 0.0, -4.0],
            [0.8, 0.0, -4.0],
            [0.2, 0.2, -3.0],
            [0.2, 0.3, -3.0],
            [0.2, 0.0, -3.0],
        ],
        l_offset=np.zeros(15),
        l_coeffs=np.zeros((15, 3)),
    )
    # strict-lower row-major positions: (1,0)->0 (2,0)->1 (2,1)->2 (3,0)->3 ...
    # (4,0)->6 (4,2)->8 (5,3)->12
    d["l_offset"][0] = 0.2
    d["l_offset"][2] = 0.3
    d["l_offset"][6] = 0.05
    d["l_offset"][12] = 0.3
    d["l_coeffs"][8] = (0.01, 0.0, 0.0)
    d["l_coeffs"][2] = (0.1, 0.0, 0.0)
    return d


@dataclass
class NoiseModelSpec:
    """Feature-dependent Gaussian ``N(mu*(x), Sigma*(x))`` on error vectors.

    ``mu*``, the LDL log-diagonal and the LDL off-diagonal each equal an
    offset plus a coefficient matrix times a 3-term basis of
    ``(speed, heading_rate, texture)``.  The basis is zero for ``constant``,
    centred and scaled raw features for ``linear``, and bounded smooth
    transforms of them for ``smooth-nonlinear``.
    """

    kind: str = "linear"
    feature_dim: int = FEATURE_DIM
    mean_offset: np.ndarray = None
    mean_coeffs: np.ndarray = None
    logvar_offset: np.ndarray = None
    logvar_coeffs: np.ndarray = None
    l_offset: np.ndarray = None
    l_coeffs: np.ndarray = None
    texture_step_std: float = 0.25

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}")
        defaults = _default_arrays()
        shapes = dict(mean_offset=(6,), mean_coeffs=(6, 3), logvar_offset=(6,), logvar_coeffs=(6, 3), l_offset=(15,), l_coeffs=(15, 3))
        for name, shape in shapes.items():
            value = getattr(self, name)
            value = np.array(defaults[name] if value is None else value, dtype=float)
            if value.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {value.shape}")
            setattr(self, name, value)

    @classmethod
    def zero(cls):
        """Noise-free model: zero mean and a negligible covariance."""
        return cls(
            kind="constant",
            mean_offset=np.zeros(6),
            logvar_offset=np.full(6, -cov.CLAMP),
            l_offset=np.zeros(15),
        )

    def basis(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        s, w, q = X[:, 0], X[:, 1], X[:, 2]
        if self.kind == "constant":
            return np.zeros((len(X), 3))
        if self.kind == "linear":
            return np.column_stack([s - 1.25, w / 0.05, q - 0.5])
        return np.column_stack([np.tanh(2.0 * (s - 1.25)), np.sin(np.pi * w / 0.1), 0.5 * np.cos(np.pi * q)])

    def mean(self, X):
        return self.mean_offset + self.basis(X) @ self.mean_coeffs.T

    def cov_params(self, X):
        """LDL parameters ``[l, d]`` of ``Sigma*(x)`` for each row of ``X``."""
        B = self.basis(X)
        l = self.l_offset + B @ self.l_coeffs.T
        d = self.logvar_offset + B @ self.logvar_coeffs.T
        return np.concatenate([l, d], axis=1)

    def prediction(self, X):
        return GaussianPrediction(self.mean(X), cov.CovarianceParams("ldl", self.cov_params(X)))


@dataclass
class SyntheticDataset:
    gt_poses: list
    gt_relative: list
    vo_relative: list
    features: np.ndarray
    errors: np.ndarray
    oracle_mu: np.ndarray | None = None
    oracle_params: np.ndarray | None = None
    error_mode: str = "right"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.errors)

    @property
    def samples(self):
        return [
            ErrorSample(f, e, vo, gt)
            for f, e, vo, gt in zip(self.features, self.errors, self.vo_relative, self.gt_relative)
        ]

    def has_oracle(self):
        return self.oracle_mu is not None and self.oracle_params is not None

    def oracle_prediction(self) -> GaussianPrediction:
        if not self.has_oracle():
            raise MissingOracle("dataset carries no generating distribution")
        return GaussianPrediction(self.oracle_mu, cov.CovarianceParams("ldl", self.oracle_params))

    def vo_trajectory(self):
        return integrate(self.vo_relative, self.gt_poses[0])


def extract_error(gt: Pose, est: Pose, mode="right"):
    """Error vector of an estimate: right ``est^-1 gt`` or left ``gt est^-1``."""
    if mode == "right":
        return pose_to_error_vector(correction_target(gt, est))
    if mode == "left":
        return pose_to_error_vector(vo_error(gt, est))
    raise ValueError(f"error mode must be one of {ERROR_MODES}")


def gen_vo_estimates(gt, noise: NoiseModelSpec, seed, force_mean=False, error_mode="right") -> SyntheticDataset:
    """Perturb ground-truth increments so each sample's error is a Gaussian draw.

    With ``force_mean`` every draw is replaced by its mean.
    """
    if error_mode not in ERROR_MODES:
        raise ValueError(f"error mode must be one of {ERROR_MODES}")
    gt = list(gt)
    if len(gt) < 2:
        raise ValueError("need at least two ground-truth poses")
    rng = np.random.default_rng(seed)
    gt_rel = [compose(inverse(a), b) for a, b in zip(gt[:-1], gt[1:])]
    texture = texture_process(len(gt_rel), rng, noise.texture_step_std)
    X = features_from_motion(gt_rel, texture)
    mu = noise.mean(X)
    params = noise.cov_params(X)
    if force_mean:
        eps = mu.copy()
    else:
        C = np.linalg.cholesky(cov.params_to_cov(params, "ldl"))
        eps = mu + np.einsum("nij,nj->ni", C, rng.normal(size=mu.shape))
    vo_rel = []
    for T, e in zip(gt_rel, eps):
        E_inv = inverse(error_vector_to_pose(e))
        vo_rel.append(compose(T, E_inv) if error_mode == "right" else compose(E_inv, T))
    return SyntheticDataset(gt, gt_rel, vo_rel, X, eps, mu, params, error_mode, {"noise_kind": noise.kind})


def gen_dataset(traj: TrajectorySpec, noise: NoiseModelSpec, seed, **kwargs) -> SyntheticDataset:
    """Trajectory plus VO estimates from one seed (independent child streams)."""
    s_traj, s_noise = np.random.SeedSequence(seed).spawn(2)
    gt = gen_trajectory(traj, s_traj)
    ds = gen_vo_estimates(gt, noise, s_noise, **kwargs)
    ds.meta["seed"] = seed
    return ds


def oracle_log_likelihood(ds: SyntheticDataset) -> float:
    """Mean log-density of each error under its own generating Gaussian."""
    return mean_log_likelihood(ds.errors, ds.oracle_prediction())
