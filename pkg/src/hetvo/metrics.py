"""Trajectory and uncertainty metrics.

Rotation metrics are reported in degrees (ATE) or millidegrees per meter
(segment errors); internal math is in radians.  Segments are aligned on
their first pose and scored by their endpoint error.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import DegenerateTrajectory, LengthMismatch
from .geometry import Pose, apply_correction, compose, error_vector_to_pose, integrate as _integrate, inverse, rotation_angle
from .loss import GaussianPrediction, mean_log_likelihood

DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class Trajectory:
    poses: list
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.poses = list(self.poses)
        if len(self.poses) < 2:
            raise ValueError("a trajectory needs at least two poses")
        if self.timestamps is not None and len(self.timestamps) != len(self.poses):
            raise LengthMismatch("timestamps and poses differ in length")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def positions(self):
        return np.array([p.translation for p in self.poses])

    def step_lengths(self):
        return np.linalg.norm(np.diff(self.positions(), axis=0), axis=1)

    def cumulative_length(self):
        return np.concatenate([[0.0], np.cumsum(self.step_lengths())])

    def path_length(self):
        return float(self.cumulative_length()[-1])


def _as_traj(t):
    return t if isinstance(t, Trajectory) else Trajectory(t)


def integrate(relatives, start: Pose | None = None) -> Trajectory:
    """Chain relative motions, ``X_{i+1} = X_i @ T_i``."""
    relatives = list(relatives)
    if not relatives:
        raise ValueError("need at least one relative transform")
    return Trajectory(_integrate(relatives, start))


def ate(est, gt):
    """Absolute trajectory error ``(meters, degrees)`` averaged over poses."""
    est, gt = _as_traj(est), _as_traj(gt)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    trans = np.linalg.norm(est.positions() - gt.positions(), axis=1).mean()
    rot = np.mean([rotation_angle(Pose(g.rotation @ e.rotation.T, np.zeros(3))) for e, g in zip(est, gt)])
    return float(trans), math.degrees(rot)


@dataclass
class SegmentStats:
    fraction: float
    length: float
    count: int
    trans_pct_mean: float
    trans_pct_std: float
    rot_millideg_per_m_mean: float
    rot_millideg_per_m_std: float


def segment_error(est, gt, i, j, length):
    """Endpoint error of segment ``i -> j`` after aligning both at pose ``i``.

    Returns ``(translation % of length, millidegrees per meter)``.
    """
    gt_rel = compose(inverse(gt[i]), gt[j])
    est_rel = compose(inverse(est[i]), est[j])
    E = compose(inverse(gt_rel), est_rel)
    return (
        100.0 * float(np.linalg.norm(E.translation)) / length,
        1000.0 * math.degrees(rotation_angle(E)) / length,
    )


def segment_pairs(gt, length):
    """``(start, end)`` index pairs: the first pose at least ``length`` meters on."""
    dist = _as_traj(gt).cumulative_length()
    ends = np.searchsorted(dist, dist + length, side="left")
    return [(i, int(j)) for i, j in enumerate(ends) if j < len(dist)]


def _summarize(fraction, length, errs):
    errs = np.asarray(errs, dtype=float).reshape(-1, 2)
    if len(errs) == 0:
        return SegmentStats(fraction, length, 0, *([float("nan")] * 4))
    return SegmentStats(
        fraction,
        length,
        len(errs),
        float(errs[:, 0].mean()),
        float(errs[:, 0].std()),
        float(errs[:, 1].mean()),
        float(errs[:, 1].std()),
    )


def segment_errors_raw(est, gt, fraction):
    """Per-segment ``(start, end, trans_pct, rot_mdeg_per_m)`` rows for one fraction."""
    est, gt = _as_traj(est), _as_traj(gt)
    total = gt.path_length()
    if total <= 0:
        raise DegenerateTrajectory("ground-truth path has zero length")
    length = fraction * total
    return length, [(i, j, *segment_error(est, gt, i, j, length)) for i, j in segment_pairs(gt, length)]


def relative_segment_errors(est, gt, fractions=DEFAULT_FRACTIONS):
    """Drift statistics over all first-pose-aligned sub-trajectories."""
    est, gt = _as_traj(est), _as_traj(gt)
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    out = []
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"segment fraction {f} outside (0, 1]")
        length, rows = segment_errors_raw(est, gt, f)
        out.append(_summarize(f, length, [r[2:] for r in rows]))
    return out


def sigma_coverage(errors, preds: GaussianPrediction, n=3):
    """Fraction of samples with ``mu - n sigma <= e <= mu + n sigma`` per dimension.

    Returns ``(per_dimension, mean)``.
    """
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(errors) != len(preds):
        raise LengthMismatch(f"{len(errors)} errors vs {len(preds)} predictions")
    mu = np.atleast_2d(preds.mu)
    sig = np.atleast_2d(preds.sigmas())
    inside = (errors >= mu - n * sig) & (errors <= mu + n * sig)
    per_dim = inside.mean(axis=0)
    return per_dim, float(per_dim.mean())


@dataclass
class MetricsReport:
    ate_trans: float
    ate_rot: float
    segment_stats: list
    coverage: dict = field(default_factory=dict)
    mean_ll: float | None = None
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["coverage"] = {str(k): {"per_dim": list(map(float, v[0])), "mean": float(v[1])} for k, v in self.coverage.items()}
        return d


def corrected_relatives(vo_relative, mu, error_mode="right"):
    """Apply each predicted mean error as a correction of its VO increment.

    Right-mode errors are composed after the estimate; left-mode errors
    (``gt @ est^-1``) before it.
    """
    out = []
    for T, m in zip(vo_relative, np.atleast_2d(mu)):
        C = error_vector_to_pose(m)
        out.append(apply_correction(T, C) if error_mode == "right" else compose(C, T))
    return out


def report(dataset, preds: GaussianPrediction | None = None, fractions=DEFAULT_FRACTIONS, correct=True):
    """Evaluate a dataset, optionally with predictions.

    With predictions and ``correct=True`` the trajectory is rebuilt from
    corrected increments; coverage and mean log-likelihood are always
    computed when predictions are supplied.
    """
    gt = Trajectory(dataset.gt_poses)
    rel = dataset.vo_relative
    if preds is not None:
        if len(preds) != len(dataset.errors):
            raise LengthMismatch(f"{len(preds)} predictions for {len(dataset.errors)} samples")
        if correct:
            rel = corrected_relatives(rel, preds.mu, getattr(dataset, "error_mode", "right"))
    est = integrate(rel, gt[0])
    t, r = ate(est, gt)
    segs = relative_segment_errors(est, gt, fractions)
    rep = MetricsReport(t, r, segs, meta={"segment_error": "endpoint", "alignment": "first-pose", "corrected": bool(preds is not None and correct)})
    if preds is not None:
        rep.coverage = {n: sigma_coverage(dataset.errors, preds, n) for n in (1, 2, 3)}
        rep.mean_ll = mean_log_likelihood(dataset.errors, preds)
    return rep
