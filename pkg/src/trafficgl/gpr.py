"""Gaussian process regression with a squared-exponential ARD kernel.

Kernel: ``k(xp, xq) = sf2 * exp(-(xp - xq)' P^-1 (xp - xq) / 2)`` with
``P = diag(l_1, ..., l_D)``.  Note ``l_d`` divides the *squared* distance, so
it plays the role of a squared length scale.  Inputs are ``(n, D)`` arrays,
one row per observation.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

LOG_2PI = math.log(2.0 * math.pi)


class GPRError(RuntimeError):
    pass


@dataclass(frozen=True)
class KernelParams:
    """Hyperparameters, stored as logarithms (``log_noise_variance`` may be -inf)."""

    log_length_scales: np.ndarray
    log_signal_variance: float
    log_noise_variance: float

    @classmethod
    def create(cls, length_scales, signal_variance: float = 1.0,
               noise_variance: float = 0.1) -> "KernelParams":
        ls = np.atleast_1d(np.asarray(length_scales, dtype=float))
        if np.any(ls <= 0) or signal_variance <= 0 or noise_variance < 0:
            raise ValueError("length scales and signal variance must be > 0, noise >= 0")
        with np.errstate(divide="ignore"):
            return cls(np.log(ls), math.log(signal_variance),
                       float(np.log(noise_variance)))

    @classmethod
    def default(cls, dim: int) -> "KernelParams":
        """All length scales and the signal variance 1, noise variance 0.1."""
        return cls.create(np.ones(dim), 1.0, 0.1)

    @property
    def dim(self) -> int:
        return self.log_length_scales.size

    @property
    def length_scales(self) -> np.ndarray:
        return np.exp(self.log_length_scales)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_length_scales,
                               [self.log_signal_variance, self.log_noise_variance]])

    @classmethod
    def from_vector(cls, v) -> "KernelParams":
        v = np.asarray(v, dtype=float)
        return cls(v[:-2].copy(), float(v[-2]), float(v[-1]))

    def to_dict(self) -> dict:
        return {"log_length_scales": self.log_length_scales.tolist(),
                "log_signal_variance": self.log_signal_variance,
                "log_noise_variance": self.log_noise_variance}


@dataclass(frozen=True)
class GprModel:
    X: np.ndarray
    y: np.ndarray
    params: KernelParams
    chol: np.ndarray  # lower triangular, L L' = K + (noise + jitter) I
    alpha: np.ndarray
    jitter: float = 0.0


@dataclass(frozen=True)
class PredictiveDistribution:
    mean: np.ndarray
    variance: np.ndarray
    includes_noise: bool


def _check_dim(A: np.ndarray, params: KernelParams) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[None, :] if params.dim > 1 or A.size == 1 else A[:, None]
    if A.shape[1] != params.dim:
        raise ValueError(f"expected {params.dim}-dimensional inputs, got {A.shape[1]}")
    return A


def se_kernel(xp, xq, params: KernelParams) -> float:
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    xq = np.atleast_1d(np.asarray(xq, dtype=float))
    if xp.shape != xq.shape or xp.size != params.dim:
        raise ValueError("input dimensions do not match the kernel")
    d = xp - xq
    return params.signal_variance * math.exp(-0.5 * float(np.sum(d * d / params.length_scales)))


def kernel_matrix(A: np.ndarray, B: np.ndarray, params: KernelParams) -> np.ndarray:
    A = _check_dim(A, params)
    B = _check_dim(B, params)
    s = 1.0 / np.sqrt(params.length_scales)
    a, b = A * s, B * s
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return params.signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0))


def fit(X: np.ndarray, y: np.ndarray, params: KernelParams) -> GprModel:
    """Factorise ``K + noise I``; on failure retry with a growing diagonal jitter."""
    X = np.asarray(X, dtype=float).reshape(len(y), params.dim) if len(y) else np.empty((0, params.dim))
    y = np.asarray(y, dtype=float).ravel()
    n = y.size
    if n == 0:
        return GprModel(X, y, params, np.empty((0, 0)), np.empty(0))
    K = kernel_matrix(X, X, params)
    K[np.diag_indices(n)] += params.noise_variance
    base = float(np.trace(K)) / n
    jitter = 0.0
    while True:
        try:
            L = linalg.cholesky(K + jitter * np.eye(n) if jitter else K, lower=True)
            break
        except linalg.LinAlgError:
            jitter = 1e-10 * base if jitter == 0.0 else jitter * 10.0
            if jitter > 1e-4 * base * 1.0000001:
                raise GPRError("covariance matrix is not positive definite even with jitter") from None
    alpha = linalg.cho_solve((L, True), y)
    return GprModel(X, y, params, L, alpha, jitter)


def predict(model: GprModel, Xstar: np.ndarray, include_noise: bool = True) -> PredictiveDistribution:
    """Posterior mean and pointwise variance at ``Xstar``.

    With ``include_noise`` the observation noise variance is added (the
    distribution of a new target rather than of the latent function).
    """
    p = model.params
    Xs = _check_dim(Xstar, p)
    prior = np.full(len(Xs), p.signal_variance)
    if model.y.size == 0:
        mean, var = np.zeros(len(Xs)), prior
    else:
        Ks = kernel_matrix(Xs, model.X, p)
        mean = Ks @ model.alpha
        v = linalg.solve_triangular(model.chol, Ks.T, lower=True)
        var = np.maximum(prior - np.sum(v * v, axis=0), 0.0)
    if include_noise:
        var = var + p.noise_variance
    return PredictiveDistribution(mean, var, include_noise)


def log_marginal_likelihood(model: GprModel) -> float:
    n = model.y.size
    return float(-0.5 * model.y @ model.alpha - np.sum(np.log(np.diag(model.chol)))
                 - 0.5 * n * LOG_2PI)


def lml_gradient(model: GprModel) -> np.ndarray:
    """Gradient of the log marginal likelihood w.r.t. ``KernelParams.to_vector()``.

    Each component is ``tr((alpha alpha' - K^-1) dK/dtheta) / 2``.
    """
    p, X, n = model.params, model.X, model.y.size
    if n == 0:
        return np.zeros(p.dim + 2)
    Kinv = linalg.cho_solve((model.chol, True), np.eye(n))
    Q = np.outer(model.alpha, model.alpha) - Kinv
    Kf = kernel_matrix(X, X, p)
    QK = Q * Kf
    grad = np.empty(p.dim + 2)
    for d in range(p.dim):
        diff = X[:, d][:, None] - X[:, d][None, :]
        grad[d] = 0.25 * np.sum(QK * diff * diff) / p.length_scales[d]
    grad[-2] = 0.5 * np.sum(QK)
    grad[-1] = 0.5 * p.noise_variance * np.trace(Q)
    return grad


def optimize_hyperparams(X: np.ndarray, y: np.ndarray, init: KernelParams, steps: int = 200,
                         learning_rate: float = 0.1, max_halvings: int = 20) -> KernelParams:
    """Gradient ascent on the log marginal likelihood in log-parameter space.

    Steps follow the per-observation gradient ``grad / n``; a step that does not
    increase the likelihood is halved until it does (or ``max_halvings`` is
    reached, which ends the search).  Returns the best parameters seen.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = max(y.size, 1)
    theta = init.to_vector()
    model = fit(X, y, init)
    best = log_marginal_likelihood(model)
    for _ in range(steps):
        g = lml_gradient(model) / n
        g[~np.isfinite(theta)] = 0.0
        step = learning_rate
        for _ in range(max_halvings):
            cand = theta + step * g
            try:
                cand_model = fit(X, y, KernelParams.from_vector(cand))
                val = log_marginal_likelihood(cand_model)
            except GPRError:
                val = -math.inf
            if val > best:
                theta, model, best = cand, cand_model, val
                break
            step *= 0.5
        else:
            break
    return KernelParams.from_vector(theta)


def predictive_band(dist: PredictiveDistribution, z: float = 1.96) -> tuple[np.ndarray, np.ndarray]:
    if z < 0:
        raise ValueError("z must be >= 0")
    half = z * np.sqrt(dist.variance)
    return dist.mean - half, dist.mean + half


def data_digest(X: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(X, dtype=float).tobytes())
    h.update(np.ascontiguousarray(y, dtype=float).tobytes())
    return h.hexdigest()


def to_json(model: GprModel) -> str:
    """Hyperparameters plus a digest of the training data; the factor is not stored."""
    return json.dumps({"params": model.params.to_dict(), "n_train": int(model.y.size),
                       "dim": model.params.dim, "data_sha256": data_digest(model.X, model.y)})


def from_json(text: str, X: np.ndarray, y: np.ndarray) -> GprModel:
    doc = json.loads(text)
    if data_digest(np.asarray(X, dtype=float), np.asarray(y, dtype=float)) != doc["data_sha256"]:
        raise GPRError("training data does not match the serialised model")
    p = doc["params"]
    params = KernelParams(np.array(p["log_length_scales"], dtype=float),
                          float(p["log_signal_variance"]), float(p["log_noise_variance"]))
    return fit(X, y, params)
