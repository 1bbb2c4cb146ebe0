import math

import numpy as np
import pytest
from scipy.stats import norm

from _util import random_pose
from hetvo import covariance as cov
from hetvo.exceptions import DegenerateTrajectory, LengthMismatch
from hetvo.geometry import Pose, compose, exp_map, rot_z
from hetvo.loss import GaussianPrediction
from hetvo.metrics import (
    Trajectory,
    ate,
    corrected_relatives,
    integrate,
    relative_segment_errors,
    report,
    segment_error,
    segment_errors_raw,
    sigma_coverage,
)
from hetvo.synthetic import NoiseModelSpec, TrajectorySpec, gen_dataset


def straight(n, step=1.0):
    return [Pose.from_translation([0, 0, step * i]) for i in range(n)]


def wiggly(rng, n):
    steps = [exp_map(np.concatenate([[0.05 * rng.normal(), 0.02 * rng.normal(), rng.uniform(0.3, 1.5)], 0.03 * rng.normal(size=3)])) for _ in range(n - 1)]
    return integrate(steps)


def perturb(traj, rng, scale=0.02):
    return Trajectory([compose(p, exp_map(scale * rng.normal(size=6))) for p in traj])


def test_ate_examples(rng):
    gt = wiggly(rng, 30)
    assert ate(gt, gt) == (0.0, 0.0)
    shifted = [Pose(p.rotation, p.translation + [0.1, 0, 0]) for p in gt]
    t, r = ate(shifted, gt)
    assert abs(t - 0.1) < 1e-12 and r == 0.0
    turned = [Pose(p.rotation @ rot_z(math.radians(2.0)), p.translation) for p in gt]
    assert abs(ate(turned, gt)[1] - 2.0) < 1e-9


def test_ate_length_mismatch(rng):
    gt = wiggly(rng, 10)
    with pytest.raises(LengthMismatch):
        ate(gt.poses[:9], gt)


def test_segment_examples(rng):
    gt = wiggly(rng, 60)
    for s in relative_segment_errors(gt, gt):
        assert s.trans_pct_mean == 0.0 and s.rot_millideg_per_m_mean == 0.0
    # a 1 cm lateral step on every 1 m increment is a 1 % drift on a straight line
    est = integrate([Pose.from_translation([0.01, 0, 1.0])] * 100)
    stats = relative_segment_errors(est, straight(101))
    for s in stats:
        assert abs(s.trans_pct_mean - 1.0) < 1e-9 and s.trans_pct_std < 1e-9


def test_segment_errors_reject_bad_input(rng):
    gt = wiggly(rng, 10)
    with pytest.raises(ValueError):
        relative_segment_errors(gt, gt, [0.0])
    with pytest.raises(ValueError):
        relative_segment_errors(gt, gt, [1.5])
    with pytest.raises(DegenerateTrajectory):
        relative_segment_errors([Pose.identity()] * 3, [Pose.identity()] * 3)


def brute_force_segments(est, gt, fraction):
    P = gt.positions()
    steps = [float(np.linalg.norm(P[k + 1] - P[k])) for k in range(len(P) - 1)]
    dist = [0.0]
    for s in steps:
        dist.append(dist[-1] + s)
    length = fraction * dist[-1]
    rows = []
    for i in range(len(P)):
        for j in range(i, len(P)):
            if dist[j] >= dist[i] + length:
                rows.append((i, j, *segment_error(est, gt, i, j, length)))
                break
    return length, rows


def matrix_segment_error(est, gt, i, j, length):
    A = np.linalg.inv(gt[i].as_matrix()) @ gt[j].as_matrix()
    B = np.linalg.inv(est[i].as_matrix()) @ est[j].as_matrix()
    E = np.linalg.inv(A) @ B
    angle = math.acos(max(-1.0, min(1.0, 0.5 * (np.trace(E[:3, :3]) - 1))))
    return 100 * np.linalg.norm(E[:3, 3]) / length, 1000 * math.degrees(angle) / length


@pytest.mark.parametrize("fraction", [0.1, 0.2, 0.3, 0.4, 0.5, 1.0])
def test_segments_match_brute_force(rng, fraction):
    gt = wiggly(rng, 150)
    est = perturb(gt, rng)
    length, rows = segment_errors_raw(est, gt, fraction)
    b_length, b_rows = brute_force_segments(est, gt, fraction)
    assert length == b_length and rows == b_rows
    for i, j, t, r in rows[::7]:
        mt, mr = matrix_segment_error(est, gt, i, j, length)
        assert abs(t - mt) < 1e-9 * max(1, mt)
        assert abs(r - mr) < 1e-4 * max(1, mr)  # acos loses precision near zero angle


def test_segment_errors_invariant_to_common_frame(rng):
    gt = wiggly(rng, 80)
    est = perturb(gt, rng)
    T = random_pose(rng)
    moved_gt = [compose(T, p) for p in gt]
    moved_est = [compose(T, p) for p in est]
    for a, b in zip(relative_segment_errors(est, gt), relative_segment_errors(moved_est, moved_gt)):
        assert a.count == b.count
        assert abs(a.trans_pct_mean - b.trans_pct_mean) < 1e-9 * max(1, a.trans_pct_mean)
        assert abs(a.rot_millideg_per_m_mean - b.rot_millideg_per_m_mean) < 1e-6 * max(1, a.rot_millideg_per_m_mean)


def test_coverage_examples():
    P = GaussianPrediction(np.zeros((4, 6)), cov.CovarianceParams("ldl", np.zeros((4, 21))))
    E = np.zeros((4, 6))
    E[0, 0] = 3.0
    E[1, 0] = 3.0001
    per_dim, mean = sigma_coverage(E, P, 3)
    assert per_dim[0] == 0.75 and np.all(per_dim[1:] == 1.0)
    assert mean == pytest.approx((0.75 + 5) / 6)
    with pytest.raises(ValueError):
        sigma_coverage(E, P, 0)
    with pytest.raises(LengthMismatch):
        sigma_coverage(E[:3], P, 1)


def test_coverage_matches_gaussian_rates(rng):
    N = 10000
    alpha = 0.5 * rng.normal(size=(N, 21))
    mu = rng.normal(size=(N, 6))
    P = GaussianPrediction(mu, cov.CovarianceParams("ldl", alpha))
    L = np.linalg.cholesky(P.covariance())
    E = mu + np.einsum("nij,nj->ni", L, rng.normal(size=(N, 6)))
    for n in (1, 2, 3):
        p = 2 * norm.cdf(n) - 1
        per_dim, _ = sigma_coverage(E, P, n)
        assert np.all(np.abs(per_dim - p) < 4 * math.sqrt(p * (1 - p) / N))


def test_report_on_oracle_predictions():
    ds = gen_dataset(TrajectorySpec(length=400), NoiseModelSpec("linear"), 3)
    raw = report(ds)
    assert raw.mean_ll is None and not raw.coverage and not raw.meta["corrected"]
    rep = report(ds, ds.oracle_prediction())
    assert rep.meta["corrected"] and set(rep.coverage) == {1, 2, 3}
    assert rep.ate_trans < raw.ate_trans
    d = rep.to_dict()
    assert d["coverage"]["3"]["mean"] == rep.coverage[3][1]


def test_perfect_correction_recovers_ground_truth():
    ds = gen_dataset(TrajectorySpec(length=100), NoiseModelSpec("linear"), 4)
    fixed = integrate(corrected_relatives(ds.vo_relative, ds.errors), ds.gt_poses[0])
    t, r = ate(fixed, ds.gt_poses)
    assert t < 1e-9 and r < 1e-7
