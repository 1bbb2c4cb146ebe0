import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import multivariate_normal

from _util import random_spd
from hetvo import covariance as cov
from hetvo.exceptions import EmptyBatch, LengthMismatch, NotPositiveDefinite
from hetvo.geometry import compose, error_vector_to_pose, inverse, log_map
from hetvo.loss import (
    GaussianPrediction,
    batch_nll,
    lie_loss,
    lie_residual,
    mean_log_likelihood,
    nll,
    nll_gradients,
    nll_terms,
)

vec6 = arrays(np.float64, 6, elements=st.floats(-2, 2, allow_nan=False))
params21 = arrays(np.float64, 21, elements=st.floats(-2, 2, allow_nan=False))


def pred(mu, alpha, kind="ldl"):
    return GaussianPrediction(np.asarray(mu, float), cov.CovarianceParams(kind, np.asarray(alpha, float)))


def fd_gradient(f, x, h=1e-6):
    g = np.empty_like(x)
    for k in range(len(x)):
        d = np.zeros_like(x)
        d[k] = h
        g[k] = (f(x + d) - f(x - d)) / (2 * h)
    return g


def grads_agree(analytic, numeric, rel=1e-5, small=1e-2, abs_small=1e-7):
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    ok = np.where(scale < small, err < abs_small, err <= rel * scale)
    return bool(ok.all())


def test_nll_examples(rng):
    assert nll(np.zeros(6), pred(np.zeros(6), np.zeros(21))) == 0.0
    alpha = rng.normal(size=21)
    e = rng.normal(size=6)
    assert nll(e, pred(e, alpha)) == pytest.approx(cov.log_det(alpha, "ldl"), abs=1e-15)
    alpha = np.zeros(21)
    alpha[15] = math.log(4)
    e = np.array([1.0, 0, 0, 0, 0, 0])
    assert nll(e, pred(np.zeros(6), alpha)) == pytest.approx(math.log(4) + 0.25, abs=1e-15)


def test_gradient_examples(rng):
    e = rng.normal(size=6)
    g = nll_gradients(e, pred(e, rng.normal(size=21)))
    assert np.array_equal(g.d_mu, np.zeros(6))
    assert np.array_equal(g.d_d, np.ones(6))
    alpha = np.zeros(21)
    alpha[15] = math.log(4)
    g = nll_gradients(np.array([1.0, 0, 0, 0, 0, 0]), pred(np.zeros(6), alpha))
    assert g.d_mu[0] == pytest.approx(-0.5, abs=1e-15)


@pytest.mark.parametrize("kind", cov.KINDS)
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(7)
    for _ in range(100):
        e, mu = rng.normal(size=6), rng.normal(size=6)
        alpha = 0.5 * rng.normal(size=21)
        g = nll_gradients(e, pred(mu, alpha, kind))
        num_mu = fd_gradient(lambda m: nll(e, pred(m, alpha, kind)), mu)
        num_alpha = fd_gradient(lambda a: nll(e, pred(mu, a, kind)), alpha)
        assert grads_agree(g.d_mu, num_mu)
        assert grads_agree(g.d_alpha, num_alpha)


def test_gradient_is_zero_outside_clamp():
    alpha = np.zeros(21)
    alpha[15] = 20.0
    g = nll_gradients(np.ones(6), pred(np.zeros(6), alpha))
    assert g.d_d[0] == 0.0


def test_batch_examples(rng):
    e, mu, alpha = rng.normal(size=6), rng.normal(size=6), rng.normal(size=21)
    p = pred(mu, alpha)
    assert batch_nll([e], [p]) == pytest.approx(nll(e, p), abs=1e-15)
    assert batch_nll([e, e], [p, p]) == pytest.approx(nll(e, p), abs=1e-15)
    E = rng.normal(size=(32, 6))
    P = [pred(rng.normal(size=6), rng.normal(size=21)) for _ in range(32)]
    assert abs(batch_nll(E, P) - np.mean([nll(x, q) for x, q in zip(E, P)])) < 1e-12


def test_batch_errors(rng):
    p = pred(np.zeros(6), np.zeros(21))
    with pytest.raises(EmptyBatch):
        batch_nll(np.zeros((0, 6)), [])
    with pytest.raises(LengthMismatch):
        batch_nll(rng.normal(size=(3, 6)), [p, p])


def test_mean_log_likelihood_examples(rng):
    p = pred(np.zeros(6), np.zeros(21))
    assert mean_log_likelihood(np.zeros((1, 6)), p) == pytest.approx(-3 * math.log(2 * math.pi), abs=1e-14)
    mu = rng.normal(size=6)
    assert mean_log_likelihood(mu[None], pred(mu, np.zeros(21))) == pytest.approx(-5.513631199228036, abs=1e-12)


@pytest.mark.parametrize("kind", cov.KINDS)
def test_mean_log_likelihood_matches_density(rng, kind):
    E = rng.normal(size=(20, 6))
    mus = rng.normal(size=(20, 6))
    alphas = 0.5 * rng.normal(size=(20, 21))
    P = GaussianPrediction(mus, cov.CovarianceParams(kind, alphas))
    S = P.covariance()
    oracle = np.mean([multivariate_normal(m, s).logpdf(x) for x, m, s in zip(E, mus, S)])
    assert abs(mean_log_likelihood(E, P) - oracle) < 1e-10


def test_ml_covariance_is_sample_second_moment(rng):
    mu = rng.normal(size=6)
    E = mu + rng.normal(size=(40, 6)) @ np.linalg.cholesky(random_spd(rng, spread=1.0)).T
    R = E - mu
    S = R.T @ R / len(R)
    for kind in cov.KINDS:
        alpha = cov.cov_to_params(S, kind)
        _, _, d_alpha = nll_terms(E, np.broadcast_to(mu, E.shape), np.broadcast_to(alpha, (len(E), 21)), kind)
        assert np.abs(d_alpha.mean(axis=0)).max() < 1e-8
        # and it is a minimum: perturbing the covariance only raises the loss
        base = batch_nll(E, GaussianPrediction(np.broadcast_to(mu, E.shape), cov.CovarianceParams(kind, np.broadcast_to(alpha, (len(E), 21)))))
        for _ in range(10):
            a2 = alpha + 1e-3 * rng.normal(size=21)
            other = batch_nll(E, GaussianPrediction(np.broadcast_to(mu, E.shape), cov.CovarianceParams(kind, np.broadcast_to(a2, (len(E), 21)))))
            assert other > base


@given(vec6, vec6, params21)
def test_mean_minimizes_at_error(e, delta, alpha):
    at_min = nll(e, pred(e, alpha))
    assert nll(e, pred(e + delta, alpha)) >= at_min
    assert np.array_equal(nll_gradients(e, pred(e, alpha)).d_mu, np.zeros(6))


@given(vec6, vec6, params21)
def test_parameterization_invariance(e, mu, alpha):
    S = cov.params_to_cov(alpha, "ldl")
    if np.linalg.cond(S) > 1e8:
        return
    a = nll(e, pred(mu, alpha, "ldl"))
    b = nll(e, pred(mu, cov.cov_to_params(S, "chol"), "chol"))
    assert abs(a - b) < 1e-9 * max(1.0, abs(a))


# --- fixed-covariance geodesic loss --------------------------------------------


def test_lie_loss_examples(rng):
    xi = np.concatenate([rng.normal(size=3), 0.1 * rng.normal(size=3)])
    assert lie_loss(xi, xi, np.eye(6)) == pytest.approx(0.0, abs=1e-25)
    target = np.zeros(6)
    xi = np.array([1.0, 0, 0, 0, 0, 0])
    assert lie_loss(xi, target, np.eye(6)) == pytest.approx(0.5, abs=1e-15)


def test_lie_loss_matches_quadratic_form(rng):
    for _ in range(50):
        xi = np.concatenate([rng.normal(size=3), 0.2 * rng.normal(size=3)])
        target = np.concatenate([rng.normal(size=3), 0.2 * rng.normal(size=3)])
        S = random_spd(rng)
        g = log_map(compose(inverse(error_vector_to_pose(target)), error_vector_to_pose(xi)))
        assert np.allclose(lie_residual(xi, target), g, atol=1e-15)
        assert abs(lie_loss(xi, target, S) - 0.5 * g @ np.linalg.solve(S, g)) < 1e-10 * max(1.0, lie_loss(xi, target, S))


def test_lie_loss_rejects_bad_covariance():
    with pytest.raises(NotPositiveDefinite):
        lie_loss(np.zeros(6), np.zeros(6), -np.eye(6))


@given(vec6, vec6)
def test_lie_loss_nonnegative(xi, target):
    xi[3:] *= 0.3
    target[3:] *= 0.3
    value = lie_loss(xi, target, np.eye(6))
    assert value >= 0
    if np.array_equal(xi, target):
        assert value < 1e-25
