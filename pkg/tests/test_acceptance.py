"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The trained regressor is shared by criteria 4 to 7 (module-scoped fixture).
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from _acceptance import record
from _util import random_pose, random_spd, random_twist
from hetvo import covariance as cov
from hetvo import fileio
from hetvo.cli import main
from hetvo.geometry import (
    apply_correction,
    compose,
    correction_target,
    error_vector_to_pose,
    exp_map,
    log_map,
    pose_to_error_vector,
    relative,
)
from hetvo.loss import GaussianPrediction, nll, nll_gradients
from hetvo.metrics import ate, corrected_relatives, integrate, relative_segment_errors, report, segment_error, segment_errors_raw, sigma_coverage
from hetvo.posegraph import build_graph, optimize
from hetvo.regressor import HeteroscedasticRegressor, backward, init_model
from hetvo.synthetic import NoiseModelSpec, TrajectorySpec, gen_dataset, oracle_log_likelihood

NOISE = NoiseModelSpec("linear")
TRAIN = dict(learning_rate=1e-4, dropout=0.0, max_epochs=100, patience=20, random_state=0)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


@pytest.fixture(scope="module")
def models():
    t0 = time.perf_counter()
    train = gen_dataset(TrajectorySpec(length=20001), NOISE, 1)
    full = HeteroscedasticRegressor(**TRAIN).fit(train.features, train.errors)
    zero = HeteroscedasticRegressor(zero_mean=True, **TRAIN).fit(train.features, train.errors)
    return full, zero, time.perf_counter() - t0


@pytest.fixture(scope="module")
def held_out():
    return gen_dataset(TrajectorySpec(length=5001), NOISE, 2)


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst_loss = worst_net = 0.0
    h = 1e-6
    for kind in cov.KINDS:
        for _ in range(100):
            e, mu, alpha = rng.normal(size=6), rng.normal(size=6), 0.5 * rng.normal(size=21)
            g = nll_gradients(e, GaussianPrediction(mu, cov.CovarianceParams(kind, alpha)))
            x = np.concatenate([mu, alpha])

            def f(v):
                return nll(e, GaussianPrediction(v[:6], cov.CovarianceParams(kind, v[6:])))

            num = np.array([(f(x + h * np.eye(27)[k]) - f(x - h * np.eye(27)[k])) / (2 * h) for k in range(27)])
            worst_loss = max(worst_loss, rel_err(np.concatenate([g.d_mu, g.d_alpha]), num))
        for _ in range(100):
            model = init_model(4, (6,), kind, rng=rng)
            for p in model.params:
                p += 0.1 * rng.normal(size=p.shape)
            X, E = rng.normal(size=(5, 4)), 0.5 * rng.normal(size=(5, 6))
            _, grads = backward(model, X, E, mode="eval")
            num = []
            for p in model.params:
                flat = p.reshape(-1)
                for k in range(flat.size):
                    old = flat[k]
                    flat[k] = old + 1e-5
                    up = backward(model, X, E, mode="eval")[0]
                    flat[k] = old - 1e-5
                    down = backward(model, X, E, mode="eval")[0]
                    flat[k] = old
                    num.append((up - down) / 2e-5)
            worst_net = max(worst_net, rel_err(np.concatenate([g.ravel() for g in grads]), np.array(num)))
    seconds = time.perf_counter() - t0
    ok = worst_loss < 1e-5 and worst_net < 1e-4 and seconds < 30
    record(1, ok, f"worst loss rel err {worst_loss:.2e}, worst network rel err {worst_net:.2e}", seconds)
    assert ok


def test_criterion_2_covariance_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst_rt = worst_ld = 0.0
    for _ in range(1000):
        S = random_spd(rng)
        dense = np.linalg.slogdet(S)[1]
        for kind in cov.KINDS:
            alpha = cov.cov_to_params(S, kind)
            worst_rt = max(worst_rt, float(np.linalg.norm(cov.params_to_cov(alpha, kind) - S)))
            worst_ld = max(worst_ld, abs(float(cov.log_det(alpha, kind)) - dense))
    seconds = time.perf_counter() - t0
    ok = worst_rt < 1e-10 and worst_ld < 1e-9 and seconds < 10
    record(2, ok, f"worst round trip {worst_rt:.2e}, worst log-det gap {worst_ld:.2e}", seconds)
    assert ok


def test_criterion_3_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(303)
    worst = [0.0, 0.0, 0.0]
    for _ in range(1000):
        xi = random_twist(rng, rot_scale=math.pi - 0.1, trans_scale=3.0)
        worst[0] = max(worst[0], float(np.abs(log_map(exp_map(xi)) - xi).max()))
        v = np.concatenate([rng.normal(size=3), rng.uniform(-0.5, 0.5, 3)])
        worst[1] = max(worst[1], float(np.abs(pose_to_error_vector(error_vector_to_pose(v)) - v).max()))
        gt, est = random_pose(rng, 0.5, 2.0), random_pose(rng, 0.5, 2.0)
        fixed = apply_correction(est, error_vector_to_pose(pose_to_error_vector(correction_target(gt, est))))
        worst[2] = max(worst[2], float(np.abs(fixed.as_matrix() - gt.as_matrix()).max()))
    seconds = time.perf_counter() - t0
    ok = worst[0] < 1e-9 and worst[1] < 1e-10 and worst[2] < 1e-10
    record(3, ok, "worst exp/log {:.1e}, Tait-Bryan {:.1e}, closure {:.1e}".format(*worst), seconds)
    assert ok


def test_criterion_4_calibration(models, held_out):
    full, _, fit_seconds = models
    t0 = time.perf_counter()
    pred = full.predict_gaussian(held_out.features)
    one = sigma_coverage(held_out.errors, pred, 1)[1]
    three = sigma_coverage(held_out.errors, pred, 3)[1]
    seconds = time.perf_counter() - t0 + fit_seconds / 2
    ok = len(held_out) >= 5000 and 0.985 <= three <= 1.0 and 0.60 <= one <= 0.76 and seconds < 300
    record(4, ok, f"N={len(held_out)}, 1-sigma {100 * one:.2f}%, 3-sigma {100 * three:.2f}%", seconds)
    assert ok


def test_criterion_5_likelihood(models, held_out):
    full, zero, fit_seconds = models
    t0 = time.perf_counter()
    ll_full = full.score(held_out.features, held_out.errors)
    ll_zero = zero.score(held_out.features, held_out.errors)
    ll_oracle = oracle_log_likelihood(held_out)
    seconds = time.perf_counter() - t0 + fit_seconds
    ok = ll_full - ll_zero >= 0.2 and abs(ll_full - ll_oracle) <= 0.1 and seconds < 600
    record(5, ok, f"full {ll_full:.3f}, zero-mean {ll_zero:.3f}, oracle {ll_oracle:.3f} nats", seconds)
    assert ok


def test_criterion_6_correction(models):
    full = models[0]
    t0 = time.perf_counter()
    ds = gen_dataset(TrajectorySpec(length=2001), NOISE, 3)
    raw = report(ds)
    corrected = report(ds, full.predict_gaussian(ds.features))
    ratio = corrected.ate_trans / raw.ate_trans
    lower = [c.trans_pct_mean < r.trans_pct_mean for c, r in zip(corrected.segment_stats, raw.segment_stats)]
    seconds = time.perf_counter() - t0
    ok = len(ds) == 2000 and ratio <= 0.5 and all(lower) and len(lower) == 5 and seconds < 300
    segs = ", ".join(f"{r.trans_pct_mean:.2f}->{c.trans_pct_mean:.2f}" for c, r in zip(corrected.segment_stats, raw.segment_stats))
    record(6, ok, f"ATE {raw.ate_trans:.2f} m -> {corrected.ate_trans:.2f} m (ratio {ratio:.2f}); segment % {segs}", seconds)
    assert ok


def test_criterion_7_pose_graph(models):
    full = models[0]
    t0 = time.perf_counter()
    rng = np.random.default_rng(707)
    monotone = True

    def run(graph):
        nonlocal monotone
        out, stats = optimize(graph)
        h = stats.chi2_history
        monotone &= all(b <= a for a, b in zip(h, h[1:]))
        return out

    # (a) consistent noiseless graph from a perturbed start
    steps = [exp_map(np.concatenate([rng.normal(size=3), 0.1 * rng.normal(size=3)])) for _ in range(40)]
    g = build_graph([(z, random_spd(rng, spread=0.5)) for z in steps])
    truth = g.poses
    start = g.with_poses([truth[0]] + [compose(p, exp_map(0.05 * rng.normal(size=6))) for p in truth[1:]])
    recovered = run(start)
    err_a = max(float(np.abs(a.as_matrix() - b.as_matrix()).max()) for a, b in zip(recovered.poses, truth))

    # (c) 50 seeded short trajectories closed by a ground-truth loop edge
    steps_per_trial = 50
    wins_weight = wins_correct = 0
    for trial in range(50):
        ds = gen_dataset(TrajectorySpec(length=steps_per_trial + 1), NOISE, 1000 + trial)
        pred = full.predict_gaussian(ds.features)
        covs = pred.covariance()
        corr = corrected_relatives(ds.vo_relative, pred.mu)
        loop = (relative(ds.gt_poses[-1], ds.gt_poses[0]), None)

        def final_ate(rel, weights):
            return ate(run(build_graph(zip(rel, weights), loop, ds.gt_poses[0])).poses, ds.gt_poses)[0]

        learned = final_ate(corr, covs)
        identity = final_ate(corr, [np.eye(6)] * steps_per_trial)
        optimized_only = final_ate(ds.vo_relative, covs)
        wins_weight += learned <= identity
        wins_correct += learned <= optimized_only
    seconds = time.perf_counter() - t0
    ok = err_a < 1e-8 and monotone and wins_weight >= 40 and wins_correct >= 40 and seconds < 600
    record(
        7,
        ok,
        f"(a) {err_a:.1e}; (b) chi2 monotone {monotone}; (c) learned<=identity {wins_weight}/50, corrected<=optimized-only {wins_correct}/50",
        seconds,
    )
    assert ok


def brute_force_rows(est, gt, fraction):
    P = np.array([p.translation for p in gt])
    dist = [0.0]
    for k in range(len(P) - 1):
        dist.append(dist[-1] + float(np.linalg.norm(P[k + 1] - P[k])))
    length = fraction * dist[-1]
    rows = []
    for i in range(len(P)):
        for j in range(i, len(P)):
            if dist[j] >= dist[i] + length:
                rows.append((i, j, *segment_error(est, gt, i, j, length)))
                break
    return length, rows


def test_criterion_8_metric_oracles():
    t0 = time.perf_counter()
    ds = gen_dataset(TrajectorySpec(length=400), NOISE, 8)
    gt, est = ds.gt_poses, ds.vo_trajectory()
    exact = all(segment_errors_raw(est, gt, f) == brute_force_rows(est, gt, f) for f in (0.1, 0.2, 0.3, 0.4, 0.5))
    stats = relative_segment_errors(est, gt)
    for s in stats:
        rows = brute_force_rows(est, gt, s.fraction)[1]
        exact &= s.count == len(rows) and s.trans_pct_mean == float(np.mean([r[2] for r in rows]))

    rng = np.random.default_rng(808)
    N = 10_000
    alpha = 0.5 * rng.normal(size=(N, 21))
    mu = rng.normal(size=(N, 6))
    pred = GaussianPrediction(mu, cov.CovarianceParams("ldl", alpha))
    L = np.linalg.cholesky(pred.covariance())
    E = mu + np.einsum("nij,nj->ni", L, rng.normal(size=(N, 6)))
    rates, within = [], True
    for n in (1, 2, 3):
        p = 2 * norm.cdf(n) - 1
        per_dim, mean = sigma_coverage(E, pred, n)
        within &= bool(np.all(np.abs(per_dim - p) < 4 * math.sqrt(p * (1 - p) / N)))
        rates.append(f"{100 * mean:.2f}%")
    seconds = time.perf_counter() - t0
    ok = exact and within
    record(8, ok, f"segments equal brute force {exact}; coverage {'/'.join(rates)} within 4 sigma {within}", seconds)
    assert ok


def test_criterion_9_determinism(tmp_path):
    t0 = time.perf_counter()

    def pipeline(d):
        d.mkdir()
        steps = [
            ["synth-gen", "--seed", "5", "--length", "1001", "--out", d / "train.csv"],
            ["synth-gen", "--seed", "6", "--length", "401", "--out", d / "test.csv"],
            ["fit", "--seed", "0", "--samples", d / "train.csv", "--out", d / "m.ckpt", "--epochs", "5"],
            ["predict", "--model", d / "m.ckpt", "--samples", d / "test.csv", "--out", d / "pred.csv"],
            ["report", "--samples", d / "test.csv", "--predictions", d / "pred.csv", "--out", d / "report"],
            ["graph-opt", "--samples", d / "test.csv", "--predictions", d / "pred.csv", "--stats", d / "graph.txt"],
        ]
        codes = [main([str(a) for a in s]) for s in steps]
        names = ["report.txt", "report.segments.tsv", "report.trajectory.tsv", "graph.txt", "m.ckpt", "pred.csv"]
        return codes, [(d / n).read_bytes() for n in names]

    codes_a, files_a = pipeline(tmp_path / "a")
    codes_b, files_b = pipeline(tmp_path / "b")
    identical = codes_a == codes_b == [0] * 6 and files_a == files_b

    rng = np.random.default_rng(909)
    poses = [random_pose(rng, trans_scale=500.0) for _ in range(500)]
    path = tmp_path / "poses.txt"
    fileio.write_kitti_poses(path, poses)
    back = fileio.parse_kitti_poses(str(path))
    worst = max(float(np.abs(a.as_matrix() - b.as_matrix()).max()) for a, b in zip(back, poses))
    seconds = time.perf_counter() - t0
    ok = identical and worst < 1e-9
    record(9, ok, f"reports byte-identical {identical}; KITTI round trip {worst:.1e}", seconds)
    assert ok
