"""Unconstrained parameterizations of SPD covariance matrices.

Two kinds are supported, both encoding an ``n x n`` matrix with
``n (n + 1) / 2`` reals (21 for ``n = 6``):

``ldl``
    ``[l, d]`` where ``l`` holds the strictly-lower entries of a
    unit-lower-triangular ``L`` (row-major) and ``d`` the log of the diagonal
    of ``D``.  ``Sigma = L diag(exp(d)) L^T`` and ``log|Sigma| = sum(d)``.
``chol``
    The lower triangle of ``L`` (row-major, diagonal included) where diagonal
    positions store ``log(L_ii)``.  ``Sigma = L L^T`` and
    ``log|Sigma| = 2 sum(log L_ii)``.

Log-diagonal entries are clamped to ``[-CLAMP, CLAMP]`` before
exponentiation.  All functions accept arbitrary leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NotPositiveDefinite

CLAMP = 12.0
KINDS = ("ldl", "chol")


def check_kind(kind):
    if kind not in KINDS:
        raise ValueError(f"covariance kind must be one of {KINDS}, got {kind!r}")
    return kind


def n_params(n=6):
    return n * (n + 1) // 2


def dim_from_params(m):
    n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if n * (n + 1) // 2 != m:
        raise ValueError(f"{m} is not a triangular number of parameters")
    return n


def _strict_lower(n):
    return np.tril_indices(n, -1)


def _lower(n):
    return np.tril_indices(n)


@dataclass(frozen=True)
class CovarianceParams:
    """A flat parameter vector (or batch of them) tagged with its kind."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        check_kind(self.kind)
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))

    @property
    def n(self):
        return dim_from_params(self.values.shape[-1])

    @property
    def l(self):
        if self.kind == "ldl":
            return self.values[..., : -self.n]
        return self.values

    @property
    def d(self):
        if self.kind != "ldl":
            raise AttributeError("Cholesky parameters have no separate d vector")
        return self.values[..., -self.n :]

    def to_cov(self):
        return params_to_cov(self.values, self.kind)

    def log_det(self):
        return log_det(self.values, self.kind)

    @classmethod
    def identity(cls, kind="ldl", n=6):
        return cls(kind, np.zeros(n_params(n)))

    @classmethod
    def from_cov(cls, sigma, kind="ldl"):
        return cls(kind, cov_to_params(sigma, kind))


def unpack(alpha, kind):
    """Factor ``Sigma = L diag(w) L^T`` from raw parameters.

    Returns ``(L, w, inside)`` where ``inside`` flags the log-diagonal entries
    that lie strictly inside the clamp interval.
    """
    check_kind(kind)
    alpha = np.asarray(alpha, dtype=float)
    m = alpha.shape[-1]
    n = dim_from_params(m)
    batch = alpha.shape[:-1]
    L = np.zeros(batch + (n, n))
    if kind == "ldl":
        raw = alpha[..., m - n :]
        L[(...,) + _strict_lower(n)] = alpha[..., : m - n]
        idx = np.arange(n)
        L[..., idx, idx] = 1.0
        w = np.exp(np.clip(raw, -CLAMP, CLAMP))
    else:
        rows, cols = _lower(n)
        L[..., rows, cols] = alpha
        idx = np.arange(n)
        raw = L[..., idx, idx].copy()
        L[..., idx, idx] = np.exp(np.clip(raw, -CLAMP, CLAMP))
        w = np.ones(batch + (n,))
    inside = (raw > -CLAMP) & (raw < CLAMP)
    return L, w, inside


def ldl_to_cov(l, d):
    alpha = np.concatenate([np.asarray(l, dtype=float), np.asarray(d, dtype=float)], axis=-1)
    return params_to_cov(alpha, "ldl")


def chol_to_cov(alpha):
    return params_to_cov(alpha, "chol")


def params_to_cov(alpha, kind="ldl"):
    L, w, _ = unpack(alpha, kind)
    return (L * w[..., None, :]) @ np.swapaxes(L, -1, -2)


def _check_spd(sigma):
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim < 2 or sigma.shape[-1] != sigma.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {sigma.shape}")
    if not np.allclose(sigma, np.swapaxes(sigma, -1, -2), rtol=1e-10, atol=1e-12):
        raise NotPositiveDefinite("covariance is not symmetric")
    eig = np.linalg.eigvalsh(sigma)
    if not np.all(eig > 1e-12):
        raise NotPositiveDefinite(f"minimum eigenvalue {eig.min():.3e} <= 1e-12")
    return sigma


def cov_to_ldl(sigma):
    """Return ``(l, d)`` such that ``ldl_to_cov(l, d)`` reproduces ``sigma``."""
    alpha = cov_to_params(sigma, "ldl")
    n = np.asarray(sigma).shape[-1]
    return alpha[..., : -n], alpha[..., -n:]


def cov_to_chol(sigma):
    return cov_to_params(sigma, "chol")


def cov_to_params(sigma, kind="ldl"):
    check_kind(kind)
    sigma = _check_spd(sigma)
    n = sigma.shape[-1]
    C = np.linalg.cholesky(sigma)
    idx = np.arange(n)
    diag = C[..., idx, idx]
    if kind == "chol":
        C = C.copy()
        C[..., idx, idx] = np.log(diag)
        return C[(...,) + _lower(n)]
    L = C / diag[..., None, :]
    return np.concatenate([L[(...,) + _strict_lower(n)], 2.0 * np.log(diag)], axis=-1)


def log_det(alpha, kind="ldl"):
    """Log-determinant straight from the parameters (no factorization)."""
    check_kind(kind)
    alpha = np.asarray(alpha, dtype=float)
    n = dim_from_params(alpha.shape[-1])
    if kind == "ldl":
        return np.clip(alpha[..., -n:], -CLAMP, CLAMP).sum(axis=-1)
    rows, cols = _lower(n)
    diag_pos = np.flatnonzero(rows == cols)
    return 2.0 * np.clip(alpha[..., diag_pos], -CLAMP, CLAMP).sum(axis=-1)


def forward_solve(L, b):
    """Solve ``L x = b`` for lower-triangular ``L`` (batched)."""
    n = L.shape[-1]
    x = np.empty(np.broadcast_shapes(L.shape[:-1], b.shape))
    for i in range(n):
        x[..., i] = (b[..., i] - np.einsum("...j,...j->...", L[..., i, :i], x[..., :i])) / L[..., i, i]
    return x


def backward_solve(L, b):
    """Solve ``L^T x = b`` for lower-triangular ``L`` (batched)."""
    n = L.shape[-1]
    x = np.empty(np.broadcast_shapes(L.shape[:-1], b.shape))
    for i in range(n - 1, -1, -1):
        x[..., i] = (b[..., i] - np.einsum("...j,...j->...", L[..., i + 1 :, i], x[..., i + 1 :])) / L[..., i, i]
    return x


def mahalanobis_sq(r, alpha, kind="ldl"):
    """``r^T Sigma^-1 r`` through one triangular solve on the factor."""
    L, w, _ = unpack(alpha, kind)
    z = forward_solve(L, np.asarray(r, dtype=float))
    return np.sum(z * z / w, axis=-1)
