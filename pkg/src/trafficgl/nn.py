"""Three-layer perceptron (sigmoid hidden, linear output) trained by Levenberg-Marquardt.

Flat parameter ordering (tag ``W1,b1,W2,b2/C``): hidden weights row-major
``(n_hidden, n_in)``, hidden biases, output weights row-major
``(n_out, n_hidden)``, output biases.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from .data import SupervisedDataset

logger = logging.getLogger(__name__)

PARAM_ORDER = "W1,b1,W2,b2/C"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class MlpTopology:
    n_in: int
    n_hidden: int
    n_out: int

    def __post_init__(self):
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ValueError(f"all layer sizes must be >= 1: {self}")

    @property
    def n_params(self) -> int:
        return self.n_hidden * (self.n_in + 1) + self.n_out * (self.n_hidden + 1)


@dataclass(frozen=True)
class Mlp:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def topology(self) -> MlpTopology:
        return MlpTopology(self.W1.shape[1], self.W1.shape[0], self.W2.shape[0])

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    @classmethod
    def from_params(cls, topology: MlpTopology, theta: np.ndarray) -> "Mlp":
        i, h, o = topology.n_in, topology.n_hidden, topology.n_out
        theta = np.asarray(theta, dtype=float)
        if theta.size != topology.n_params:
            raise ValueError(f"expected {topology.n_params} parameters, got {theta.size}")
        a = h * i
        b = a + h
        c = b + o * h
        return cls(theta[:a].reshape(h, i).copy(), theta[a:b].copy(),
                   theta[b:c].reshape(o, h).copy(), theta[c:].copy())

    def to_json(self, scaler: dict | None = None) -> str:
        t = self.topology
        doc = {"topology": {"n_in": t.n_in, "n_hidden": t.n_hidden, "n_out": t.n_out},
               "param_order": PARAM_ORDER, "params": self.params.tolist(), "scaler": scaler}
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "Mlp":
        doc = json.loads(text)
        if doc.get("param_order") != PARAM_ORDER:
            raise ValueError(f"unsupported parameter ordering {doc.get('param_order')!r}")
        return cls.from_params(MlpTopology(**doc["topology"]), np.array(doc["params"]))


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 300
    lm_lambda_init: float = 1e-3
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 10.0
    lm_lambda_max: float = 1e10
    grad_tol: float = 1e-7
    val_fraction: float = 0.15
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lm_lambda_up <= 1 or self.lm_lambda_down <= 1:
            raise ValueError("lambda factors must be > 1")
        if self.grad_tol <= 0 or self.lm_lambda_init <= 0:
            raise ValueError("tolerances must be > 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class TrainHistory:
    sse: list[float] = field(default_factory=list)  # initial + one per accepted step
    val_sse: list[float] = field(default_factory=list)
    epochs: int = 0
    stop_reason: str = ""
    best_epoch: int = 0


def hidden_units(n_i: int, n_0: int, a: int) -> int:
    """Hidden layer size ``sqrt(n_i + n_0) + a``, rounded half up."""
    if not 1 <= a <= 10:
        raise ValueError(f"a must lie in 1..10, got {a}")
    if n_i < 1 or n_0 < 1:
        raise ValueError("need at least one input and one output unit")
    return max(1, math.floor(math.sqrt(n_i + n_0) + a + 0.5))


def init_mlp(topology: MlpTopology, seed: int) -> Mlp:
    """Uniform weights in ``±1/sqrt(fan_in)``."""
    rng = np.random.default_rng(seed)
    i, h, o = topology.n_in, topology.n_hidden, topology.n_out
    r1, r2 = 1.0 / math.sqrt(i), 1.0 / math.sqrt(h)
    return Mlp(rng.uniform(-r1, r1, (h, i)), rng.uniform(-r1, r1, h),
               rng.uniform(-r2, r2, (o, h)), rng.uniform(-r2, r2, o))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """``W2 @ sigmoid(W1 @ x + b1) + b2`` for one vector or a batch of rows."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.W1.shape[1]:
        raise ValueError(f"network expects {net.W1.shape[1]} inputs, got {x.shape[-1]}")
    return _sigmoid(x @ net.W1.T + net.b1) @ net.W2.T + net.b2


def jacobian(net: Mlp, inputs: np.ndarray) -> np.ndarray:
    """d(output)/d(params) for every (sample, output) pair.

    Rows are sample-major: row ``n * n_out + k`` is output ``k`` of sample ``n``.
    Columns follow ``PARAM_ORDER``.
    """
    X = np.atleast_2d(np.asarray(inputs, dtype=float))
    N = X.shape[0]
    h, i = net.W1.shape
    o = net.W2.shape[0]
    H = _sigmoid(X @ net.W1.T + net.b1)
    G = net.W2[None, :, :] * (H * (1.0 - H))[:, None, :]  # (N, o, h) d out_k / d z_j
    J = np.zeros((N, o, net.topology.n_params))
    J[:, :, : h * i] = (G[:, :, :, None] * X[:, None, None, :]).reshape(N, o, h * i)
    J[:, :, h * i : h * i + h] = G
    base = h * i + h
    for k in range(o):
        J[:, k, base + k * h : base + (k + 1) * h] = H
        J[:, k, base + o * h + k] = 1.0
    return J.reshape(N * o, -1)


def normal_equations(net: Mlp, X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """``(J'J, J'r, r'r)`` for residuals ``r = forward(X) - Y`` without forming ``J``.

    The hidden-layer block is ``(Z'Z) * (W2'W2)`` expanded over fan-in, with
    ``Z[n, (j, i)] = h_j'(n) x_i(n)``; the output block is block diagonal.
    """
    X = np.atleast_2d(X)
    h, i = net.W1.shape
    o = net.W2.shape[0]
    H = _sigmoid(X @ net.W1.T + net.b1)
    R = H @ net.W2.T + net.b2 - Y
    dH = H * (1.0 - H)
    Z = np.concatenate([(dH[:, :, None] * X[:, None, :]).reshape(len(X), h * i), dH], axis=1)
    Ht = np.concatenate([H, np.ones((len(X), 1))], axis=1)
    jidx = np.concatenate([np.repeat(np.arange(h), i), np.arange(h)])
    # output-group parameter q -> (output k, column of Ht)
    kidx = np.concatenate([np.repeat(np.arange(o), h), np.arange(o)])
    cidx = np.concatenate([np.tile(np.arange(h), o), np.full(o, h)])

    n_s = jidx.size
    A = np.empty((n_s + kidx.size,) * 2)
    M = net.W2.T @ net.W2
    A[:n_s, :n_s] = (Z.T @ Z) * M[np.ix_(jidx, jidx)]
    HH = Ht.T @ Ht
    A[n_s:, n_s:] = HH[np.ix_(cidx, cidx)] * (kidx[:, None] == kidx[None, :])
    cross = (Z.T @ Ht)[:, cidx] * net.W2.T[np.ix_(jidx, kidx)]
    A[:n_s, n_s:] = cross
    A[n_s:, :n_s] = cross.T
    g = np.concatenate([_shared_grad(X, dH, R @ net.W2), (R.T @ H).ravel(), R.sum(axis=0)])
    return A, g, float(np.sum(R * R))


def _shared_grad(X, dH, RW):
    D = dH * RW  # (N, h)
    return np.concatenate([(D.T @ X).ravel(), D.sum(axis=0)])


def _sse(net: Mlp, X: np.ndarray, Y: np.ndarray) -> float:
    r = forward(net, X) - Y
    return float(np.sum(r * r))


def train_lm(net: Mlp, train: SupervisedDataset, cfg: TrainConfig,
             val: SupervisedDataset | None = None) -> tuple[Mlp, TrainHistory]:
    """Levenberg-Marquardt on the sum of squared errors over all target columns.

    Each epoch solves ``(J'J + lambda I) delta = -J'r``; a step is accepted only
    if it lowers the training SSE.  With validation data (given, or the last
    ``cfg.val_fraction`` of ``train``) training stops after ``cfg.patience``
    accepted steps without a new best validation SSE and the best-validation
    network is returned.
    """
    X, Y = train.inputs, train.targets
    if val is None and cfg.val_fraction > 0 and len(train) >= 2:
        n_val = max(1, int(round(cfg.val_fraction * len(train))))
        X, Y = X[:-n_val], Y[:-n_val]
        Xv, Yv = train.inputs[-n_val:], train.targets[-n_val:]
    elif val is not None:
        Xv, Yv = val.inputs, val.targets
    else:
        Xv = Yv = None
    return fit_lm(net, X, Y, cfg, Xv, Yv)


def fit_lm(net: Mlp, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig,
           X_val: np.ndarray | None = None, Y_val: np.ndarray | None = None) -> tuple[Mlp, TrainHistory]:
    topo = net.topology
    Y = np.asarray(Y, dtype=float).reshape(len(X), topo.n_out)
    theta = net.params
    sse = _sse(net, X, Y)
    if not math.isfinite(sse):
        raise TrainingError("initial loss is not finite")
    hist = TrainHistory(sse=[sse])
    use_val = X_val is not None and len(X_val) > 0
    best_net, best_val, since_best = net, math.inf, 0
    if use_val:
        best_val = _sse(net, X_val, Y_val)
        hist.val_sse.append(best_val)
    lam = cfg.lm_lambda_init
    eye = np.eye(topo.n_params)
    hist.stop_reason = "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        hist.epochs = epoch
        A, g, _ = normal_equations(net, X, Y)
        if np.max(np.abs(g)) < cfg.grad_tol:
            hist.stop_reason = "grad_tol"
            break
        while True:
            try:
                delta = linalg.solve(A + lam * eye, -g, assume_a="pos")
            except (linalg.LinAlgError, ValueError):
                delta = None
            if delta is not None:
                cand = Mlp.from_params(topo, theta + delta)
                cand_sse = _sse(cand, X, Y)
                if not math.isfinite(cand_sse) and lam >= cfg.lm_lambda_max:
                    raise TrainingError(f"non-finite loss at epoch {epoch}")
                if cand_sse < sse:
                    break
            lam *= cfg.lm_lambda_up
            if lam > cfg.lm_lambda_max:
                break
        if lam > cfg.lm_lambda_max:
            hist.stop_reason = "lambda_max"
            break
        net, theta, sse = cand, cand.params, cand_sse
        lam = max(lam / cfg.lm_lambda_down, 1e-20)
        hist.sse.append(sse)
        if use_val:
            v = _sse(net, X_val, Y_val)
            hist.val_sse.append(v)
            if v < best_val:
                best_net, best_val, since_best = net, v, 0
                hist.best_epoch = len(hist.sse) - 1
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    hist.stop_reason = "patience"
                    break
    if not use_val:
        best_net = net
        hist.best_epoch = len(hist.sse) - 1
    return best_net, hist


@dataclass(frozen=True)
class ArchitectureChoice:
    a: int
    net: Mlp
    val_rmse: tuple[float, ...]  # one per candidate a = 1..10
    history: TrainHistory


def main_task_rmse(net: Mlp, ds: SupervisedDataset) -> float:
    cols = list(ds.main_target_columns)
    r = forward(net, ds.inputs)[:, cols] - ds.targets[:, cols]
    return float(np.sqrt(np.mean(r * r)))


def select_architecture(train: SupervisedDataset, val: SupervisedDataset, cfg: TrainConfig,
                        candidates: Sequence[int] = range(1, 11)) -> ArchitectureChoice:
    """Train one net per hidden-size constant ``a``; keep the lowest main-task validation RMSE.

    Every candidate starts from the same seed; ties go to the smaller ``a``.
    """
    if len(val) == 0:
        raise ValueError("validation set is empty")
    n_in, n_out = train.inputs.shape[1], train.targets.shape[1]
    best = None
    scores = []
    for a in candidates:
        topo = MlpTopology(n_in, hidden_units(n_in, n_out, a), n_out)
        net, hist = train_lm(init_mlp(topo, cfg.seed), train, cfg, val=val)
        score = main_task_rmse(net, val)
        scores.append(score)
        if best is None or score < best[0]:
            best = (score, a, net, hist)
    _, a, net, hist = best
    return ArchitectureChoice(a, net, tuple(scores), hist)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
