"""Fully connected heteroscedastic regressor trained with Adam.

The network maps a feature vector to 27 outputs: a 6-D mean error vector
followed by 21 covariance parameters (kind ``ldl`` or ``chol``).  The
functional layer (:func:`forward`, :func:`backward`, :func:`adam_step`,
:func:`train`) works on a plain :class:`RegressorModel`;
:class:`HeteroscedasticRegressor` wraps it in the scikit-learn estimator API.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import covariance as cov
from .exceptions import DimensionMismatch, EmptyInput, InsufficientSamples, NotPositiveDefinite
from .loss import GaussianPrediction, mean_log_likelihood, nll_terms

log = logging.getLogger(__name__)

ERROR_DIM = 6
OUTPUT_DIM = ERROR_DIM + cov.n_params(ERROR_DIM)


@dataclass
class RegressorModel:
    weights: list
    biases: list
    cov_kind: str = "ldl"
    dropout_rate: float = 0.0
    zero_mean: bool = False
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    out_shift: np.ndarray | None = None
    out_scale: np.ndarray | None = None

    def __post_init__(self):
        cov.check_kind(self.cov_kind)
        for a, b in zip(self.weights[:-1], self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise DimensionMismatch(f"layer widths do not chain: {a.shape} -> {b.shape}")
        if self.weights[-1].shape[1] != OUTPUT_DIM:
            raise DimensionMismatch(f"final layer must have {OUTPUT_DIM} units")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if (self.out_shift is None) != (self.out_scale is None):
            raise ValueError("out_shift and out_scale must be given together")

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def params(self):
        """Flat list of parameter arrays: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    dropout_rate: float = 0.1
    hidden: tuple = (64, 256)
    cov_kind: str = "ldl"
    standardize: bool = True
    zero_mean: bool = False
    init_from_data: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        cov.check_kind(self.cov_kind)
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


@dataclass
class TrainingLog:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


def init_model(input_dim, hidden=(64, 256), cov_kind="ldl", rng=None, dropout_rate=0.0, zero_mean=False):
    """He-uniform initialized weights, zero biases."""
    rng = np.random.default_rng(rng)
    sizes = [int(input_dim), *hidden, OUTPUT_DIM]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RegressorModel(weights, biases, cov_kind, dropout_rate, zero_mean)


def _standardize(model, X):
    if model.x_mean is None:
        return X
    return (X - model.x_mean) / model.x_scale


def _as_batch(model, features):
    X = np.asarray(features, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.input_dim:
        raise DimensionMismatch(f"expected {model.input_dim} features, got {X.shape[1]}")
    return X, single


def _run(model, X, train, rng):
    """Forward pass keeping the activations and dropout masks for backprop."""
    h = _standardize(model, X)
    acts, masks = [h], []
    last = len(model.weights) - 1
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if k < last:
            h = np.maximum(h, 0.0)
            if train and model.dropout_rate > 0:
                keep = 1.0 - model.dropout_rate
                mask = (rng.random(h.shape) < keep) / keep
                h = h * mask
            else:
                mask = None
            masks.append(mask)
            acts.append(h)
    out = h
    if model.out_scale is not None:
        out = out * model.out_scale + model.out_shift
    if model.zero_mean:
        out = out.copy()
        out[:, :ERROR_DIM] = 0.0
    return out, acts, masks


def forward(model: RegressorModel, features, mode="eval", rng=None) -> GaussianPrediction:
    """Predict the Gaussian error model for one feature vector or a batch."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    X, single = _as_batch(model, features)
    rng = np.random.default_rng(rng) if mode == "train" else None
    out, _, _ = _run(model, X, mode == "train", rng)
    if single:
        out = out[0]
    return GaussianPrediction(out[..., :ERROR_DIM], cov.CovarianceParams(model.cov_kind, out[..., ERROR_DIM:]))


def backward(model: RegressorModel, features, errors, mode="train", rng=None):
    """Mean batch loss and its exact gradients w.r.t. every weight and bias.

    Returns ``(loss, grads)`` with ``grads`` aligned with ``model.params``.
    """
    X, _ = _as_batch(model, features)
    E = np.atleast_2d(np.asarray(errors, dtype=float))
    if E.shape != (X.shape[0], ERROR_DIM):
        raise DimensionMismatch(f"errors shape {E.shape} does not match {X.shape[0]} samples")
    rng = np.random.default_rng(rng) if mode == "train" else None
    out, acts, masks = _run(model, X, mode == "train", rng)
    loss, d_mu, d_alpha = nll_terms(E, out[:, :ERROR_DIM], out[:, ERROR_DIM:], model.cov_kind)
    B = X.shape[0]
    delta = np.concatenate([np.zeros_like(d_mu) if model.zero_mean else d_mu, d_alpha], axis=1) / B
    if model.out_scale is not None:
        delta = delta * model.out_scale

    grads = [None] * (2 * len(model.weights))
    for k in range(len(model.weights) - 1, -1, -1):
        grads[2 * k] = acts[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k > 0:
            delta = delta @ model.weights[k].T
            if masks[k - 1] is not None:
                delta = delta * masks[k - 1]
            delta = delta * (acts[k] > 0)
    return float(loss.mean()), grads


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """In-place Adam update with bias-corrected moments."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return params, state


def fit_empirical_sigma(errors):
    """Unbiased sample covariance of error vectors."""
    E = np.asarray(errors, dtype=float)
    if E.ndim != 2 or E.shape[0] < E.shape[1] + 1:
        raise InsufficientSamples(f"need at least {ERROR_DIM + 1} samples, got {len(E)}")
    S = np.cov(E, rowvar=False, ddof=1)
    if np.linalg.eigvalsh(S).min() <= 1e-12 * max(1.0, np.trace(S)):
        raise NotPositiveDefinite("error samples are degenerate (rank-deficient covariance)")
    return S


def output_affine(mean, sigma, kind):
    """Shift and scale mapping raw network outputs to real units.

    The shift is the homoscedastic fit ``(mean, sigma)``.  The scales make
    one raw unit mean one error standard deviation ``s``: ``s_i`` for the
    mean, ``s_i / s_j`` for LDL off-diagonals, ``s_i`` for Cholesky
    off-diagonals and 1 for log-diagonals.  This elementwise map is exactly
    the effect of standardizing the targets.
    """
    s = np.sqrt(np.diag(sigma))
    n = len(s)
    alpha = np.clip(cov.cov_to_params(sigma, kind), -cov.CLAMP + 1e-3, cov.CLAMP - 1e-3)
    if kind == "ldl":
        r, c = np.tril_indices(n, -1)
        cov_scale = np.concatenate([s[r] / s[c], np.ones(n)])
    else:
        r, c = np.tril_indices(n)
        cov_scale = np.where(r == c, 1.0, s[r])
    return np.concatenate([mean, alpha]), np.concatenate([s, cov_scale])


def _init_output_head(model, E):
    # Start exactly at the homoscedastic ML fit: zero output layer plus an
    # output affine map in units of the error spread.  Adam takes steps of
    # about one learning rate per parameter, so without the rescaling the
    # small rotation outputs would be drowned by translation-sized steps.
    mean = np.zeros(ERROR_DIM) if model.zero_mean else E.mean(axis=0)
    R = E - mean
    S = R.T @ R / len(R)
    S = S + 1e-12 * max(1.0, np.trace(S)) * np.eye(ERROR_DIM)
    model.out_shift, model.out_scale = output_affine(mean, S, model.cov_kind)
    model.weights[-1][:] = 0.0
    model.biases[-1][:] = 0.0


def train(X, E, X_val, E_val, config: TrainConfig):
    """Mini-batch Adam with early stopping on validation NLL.

    Returns the best-validation model and a :class:`TrainingLog`.
    """
    X = np.asarray(X, dtype=float)
    E = np.asarray(E, dtype=float)
    X_val = np.asarray(X_val, dtype=float)
    E_val = np.asarray(E_val, dtype=float)
    if len(X) == 0 or len(X_val) == 0:
        raise EmptyInput("training and validation sets must be non-empty")
    if X.ndim != 2 or X_val.ndim != 2 or X.shape[1] != X_val.shape[1]:
        raise DimensionMismatch("train and validation features must share one dimension")
    if E.shape != (len(X), ERROR_DIM) or E_val.shape != (len(X_val), ERROR_DIM):
        raise DimensionMismatch("errors must be (n_samples, 6)")

    rng = np.random.default_rng(config.seed)
    model = init_model(X.shape[1], config.hidden, config.cov_kind, rng, config.dropout_rate, config.zero_mean)
    if config.standardize:
        model.x_mean = X.mean(axis=0)
        scale = X.std(axis=0)
        # near-constant columns (e.g. round-off around zero) are only centred
        model.x_scale = np.where(scale > 1e-9 * np.maximum(1.0, np.abs(model.x_mean)), scale, 1.0)
    if config.init_from_data:
        _init_output_head(model, E)

    params = model.params
    state = AdamState.zeros_like(params)
    history = TrainingLog()
    best_val, best_model, since_best = np.inf, model.copy(), 0
    n = len(X)
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss, grads = backward(model, X[idx], E[idx], "train", rng)
            adam_step(params, grads, state, config)
            losses.append(loss)
        pred = forward(model, X_val)
        val = float(nll_terms(E_val, pred.mu, pred.cov.values, model.cov_kind)[0].mean())
        history.train_loss.append(float(np.mean(losses)))
        history.val_loss.append(val)
        log.debug("epoch %d train %.6f val %.6f", epoch, history.train_loss[-1], val)
        if val < best_val:
            best_val, best_model, since_best = val, model.copy(), 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                history.stopped_early = True
                break
    return best_model, history


class HeteroscedasticRegressor(RegressorMixin, BaseEstimator):
    """Predicts a biased Gaussian error model ``N(mu(x), Sigma(x))``.

    ``predict`` returns the mean error vector (the correction);
    ``predict_gaussian`` returns means and covariance parameters.  ``score``
    is the held-out mean log-likelihood rather than R^2.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the relu hidden layers.
    cov_kind : {"ldl", "chol"}
        Covariance parameterization of the 21 covariance outputs.
    zero_mean : bool
        Restrict the model to ``N(0, Sigma(x))``; the mean head is ignored.
    init_from_data : bool
        Initialize the output biases to the training mean and covariance.
    validation_fraction : float
        Share of the training data held out for early stopping when no
        explicit validation set is passed to ``fit``.
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 256),
        cov_kind="ldl",
        learning_rate=1e-4,
        batch_size=32,
        max_epochs=200,
        patience=20,
        dropout=0.1,
        beta_1=0.9,
        beta_2=0.999,
        epsilon=1e-8,
        standardize=True,
        zero_mean=False,
        init_from_data=True,
        validation_fraction=0.1,
        random_state=None,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.cov_kind = cov_kind
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.dropout = dropout
        self.beta_1 = beta_1
        self.beta_2 = beta_2
        self.epsilon = epsilon
        self.standardize = standardize
        self.zero_mean = zero_mean
        self.init_from_data = init_from_data
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _train_config(self, seed):
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            beta1=self.beta_1,
            beta2=self.beta_2,
            epsilon=self.epsilon,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=seed,
            dropout_rate=self.dropout,
            hidden=tuple(self.hidden_layer_sizes),
            cov_kind=self.cov_kind,
            standardize=self.standardize,
            zero_mean=self.zero_mean,
            init_from_data=self.init_from_data,
        )

    def fit(self, X, y, X_val=None, y_val=None):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if y.ndim != 2 or y.shape[1] != ERROR_DIM:
            raise DimensionMismatch(f"targets must be (n_samples, {ERROR_DIM}) error vectors")
        rng = np.random.default_rng(self.random_state)
        seed = int(rng.integers(2**31))
        if X_val is None:
            if y_val is not None:
                raise ValueError("y_val given without X_val")
            order = rng.permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            X, X_val, y, y_val = X[tr_idx], X[val_idx], y[tr_idx], y[val_idx]
        else:
            X_val, y_val = check_X_y(X_val, y_val, multi_output=True, y_numeric=True)
        self.model_, self.training_log_ = train(X, y, X_val, y_val, self._train_config(seed))
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: RegressorModel, **params):
        """Wrap an already trained model (e.g. one loaded from a checkpoint)."""
        est = cls(cov_kind=model.cov_kind, zero_mean=model.zero_mean, **params)
        est.model_ = model
        est.n_features_in_ = model.input_dim
        return est

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise DimensionMismatch(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict_gaussian(self, X) -> GaussianPrediction:
        return forward(self.model_, self._check(X), mode="eval")

    def predict(self, X):
        return self.predict_gaussian(X).mu

    def predict_cov(self, X):
        return self.predict_gaussian(X).covariance()

    def score(self, X, y, sample_weight=None):
        """Mean Gaussian log-likelihood of ``y`` (higher is better)."""
        if sample_weight is not None:
            raise NotImplementedError("sample weights are not supported")
        return mean_log_likelihood(np.asarray(y, dtype=float), self.predict_gaussian(X))


@dataclass
class ErrorSample:
    """One training pair: model input and the error vector it should explain."""

    features: np.ndarray
    error: np.ndarray
    vo_relative: object = None
    gt_relative: object = None
