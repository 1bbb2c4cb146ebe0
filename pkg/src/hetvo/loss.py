"""Biased heteroscedastic Gaussian NLL with analytic gradients.

The training loss follows the LDL-form objective exactly: per sample

    nll = log|Sigma| + (e - mu)^T Sigma^-1 (e - mu)

without the 1/2 factor and the ``(n/2) log 2 pi`` constant.
:func:`mean_log_likelihood` adds both back so that reported values are true
log-densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import covariance as cov
from .exceptions import EmptyBatch, LengthMismatch, NotPositiveDefinite
from .geometry import error_vector_to_pose, inverse, compose, log_map


@dataclass(frozen=True)
class GaussianPrediction:
    """Mean error vector(s) and covariance parameters; may be batched."""

    mu: np.ndarray
    cov: cov.CovarianceParams

    def __post_init__(self):
        object.__setattr__(self, "mu", np.asarray(self.mu, dtype=float))

    @property
    def kind(self):
        return self.cov.kind

    def __len__(self):
        return 1 if self.mu.ndim == 1 else self.mu.shape[0]

    def __getitem__(self, i):
        return GaussianPrediction(self.mu[i], cov.CovarianceParams(self.kind, self.cov.values[i]))

    def covariance(self):
        return self.cov.to_cov()

    def sigmas(self):
        """Per-dimension standard deviations (square roots of the diagonal)."""
        S = self.covariance()
        return np.sqrt(np.diagonal(S, axis1=-2, axis2=-1))

    @classmethod
    def stack(cls, preds):
        preds = list(preds)
        kinds = {p.kind for p in preds}
        if len(kinds) != 1:
            raise ValueError("cannot stack predictions of different covariance kinds")
        return cls(
            np.stack([p.mu for p in preds]),
            cov.CovarianceParams(kinds.pop(), np.stack([p.cov.values for p in preds])),
        )


@dataclass(frozen=True)
class LossGradients:
    d_mu: np.ndarray
    d_l: np.ndarray
    d_d: np.ndarray | None = None

    @property
    def d_alpha(self):
        """Gradient w.r.t. the flat covariance parameter vector."""
        if self.d_d is None:
            return self.d_l
        return np.concatenate([self.d_l, self.d_d], axis=-1)


def nll_terms(errors, mu, alpha, kind="ldl"):
    """Vectorized per-sample loss and gradients.

    Returns ``(loss, d_mu, d_alpha)`` with shapes ``(B,)``, ``(B, n)`` and
    ``(B, m)``.  This is the workhorse behind :func:`nll`,
    :func:`nll_gradients` and the regressor's backward pass.
    """
    errors = np.asarray(errors, dtype=float)
    mu = np.asarray(mu, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    L, w, inside = cov.unpack(alpha, kind)
    n = L.shape[-1]
    r = errors - mu
    z = cov.forward_solve(L, r)
    v = z / w
    u = cov.backward_solve(L, v)  # Sigma^-1 r
    maha = np.sum(z * v, axis=-1)
    loss = cov.log_det(alpha, kind) + maha

    d_mu = -2.0 * u
    outer = -2.0 * u[..., :, None] * z[..., None, :]  # d maha / d L_ij
    if kind == "ldl":
        d_l = outer[(...,) + np.tril_indices(n, -1)]
        d_d = (1.0 - z * v) * inside
        d_alpha = np.concatenate([d_l, d_d], axis=-1)
    else:
        idx = np.arange(n)
        diag = L[..., idx, idx]
        outer[..., idx, idx] = (2.0 + outer[..., idx, idx] * diag) * inside
        d_alpha = outer[(...,) + np.tril_indices(n)]
    return loss, d_mu, d_alpha


def nll(e, pred: GaussianPrediction):
    loss, _, _ = nll_terms(e, pred.mu, pred.cov.values, pred.kind)
    return float(loss) if np.ndim(loss) == 0 else loss


def nll_gradients(e, pred: GaussianPrediction) -> LossGradients:
    _, d_mu, d_alpha = nll_terms(e, pred.mu, pred.cov.values, pred.kind)
    if pred.kind == "ldl":
        n = d_mu.shape[-1]
        return LossGradients(d_mu, d_alpha[..., :-n], d_alpha[..., -n:])
    return LossGradients(d_mu, d_alpha)


def _check_batch(errors, preds):
    errors = np.atleast_2d(np.asarray(errors, dtype=float))
    if errors.shape[0] == 0:
        raise EmptyBatch("empty batch")
    if isinstance(preds, GaussianPrediction):
        pred = preds if preds.mu.ndim == 2 else GaussianPrediction(
            preds.mu[None], cov.CovarianceParams(preds.kind, preds.cov.values[None])
        )
    else:
        preds = list(preds)
        if not preds:
            raise EmptyBatch("empty batch")
        pred = GaussianPrediction.stack(preds)
    if len(pred) != errors.shape[0]:
        raise LengthMismatch(f"{errors.shape[0]} errors vs {len(pred)} predictions")
    return errors, pred


def batch_nll(errors, preds):
    """Mean per-sample NLL over a batch."""
    errors, pred = _check_batch(errors, preds)
    loss, _, _ = nll_terms(errors, pred.mu, pred.cov.values, pred.kind)
    return float(np.mean(loss))


def mean_log_likelihood(errors, preds):
    """Mean Gaussian log-density, constants included."""
    errors, pred = _check_batch(errors, preds)
    n = errors.shape[-1]
    return -0.5 * batch_nll(errors, pred) - 0.5 * n * math.log(2.0 * math.pi)


def lie_residual(xi, target):
    """Twist of ``pose(target)^-1 @ pose(xi)`` for two error vectors."""
    return log_map(compose(inverse(error_vector_to_pose(target)), error_vector_to_pose(xi)))


def lie_loss(xi, target, sigma_fixed):
    """Fixed-covariance geodesic loss ``0.5 g^T Sigma^-1 g``."""
    sigma_fixed = np.asarray(sigma_fixed, dtype=float)
    try:
        factor = linalg.cho_factor(sigma_fixed, lower=True)
    except linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    g = lie_residual(xi, target)
    return 0.5 * float(g @ linalg.cho_solve(factor, g))
