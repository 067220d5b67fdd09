"""Graphical lasso by block coordinate descent over lasso subproblems.

The covariance estimate ``W`` is updated one row/column at a time.  For column
``i`` the off-diagonal block is ``w12 = W11 @ beta`` where ``beta`` solves

    min_beta  1/2 beta' W11 beta - beta' s12 + rho * ||beta||_1

which is the lasso ``1/2 ||W11^{1/2} beta - b||^2 + rho ||beta||_1`` with
``b = W11^{-1/2} s12`` expanded (the constant ``b'b/2`` dropped).  The diagonal
of ``W`` is fixed at ``S_ii + rho`` throughout.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, NamedTuple, Sequence

import numba
import numpy as np

logger = logging.getLogger(__name__)


class GlassoError(ValueError):
    pass


@dataclass(frozen=True)
class CovarianceMatrix:
    entries: np.ndarray
    variable_names: tuple = ()

    def __post_init__(self):
        S = np.asarray(self.entries, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1]:
            raise GlassoError("covariance must be a square matrix")
        if not np.allclose(S, S.T, rtol=0.0, atol=1e-10):
            raise GlassoError("covariance is not symmetric")
        if np.any(np.diag(S) < 0):
            raise GlassoError("covariance has a negative diagonal entry")
        if self.variable_names and len(self.variable_names) != S.shape[0]:
            raise GlassoError("variable_names do not match dimension")
        object.__setattr__(self, "entries", S)
        object.__setattr__(self, "variable_names", tuple(self.variable_names))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class GlassoConfig:
    rho: float
    outer_tol: float | None = None  # None: 1e-4 * mean |off-diagonal S|
    max_outer_iters: int = 100
    inner_tol: float = 1e-8
    max_inner_iters: int = 1000
    zero_threshold: float = 5e-4
    duality_tol: float = 1e-8  # max |W Theta - I| also required for convergence

    def __post_init__(self):
        if self.rho < 0:
            raise GlassoError("rho must be >= 0")
        if self.outer_tol is not None and self.outer_tol <= 0:
            raise GlassoError("outer_tol must be > 0")
        if self.inner_tol <= 0 or self.zero_threshold < 0 or self.duality_tol <= 0:
            raise GlassoError("tolerances must be positive")


@dataclass(frozen=True)
class PrecisionEstimate:
    W: np.ndarray
    Theta: np.ndarray
    iterations_used: int
    converged: bool
    variable_names: tuple = ()


@dataclass(frozen=True)
class GraphicalModel:
    nodes: tuple
    edges: frozenset  # of (i, j) index pairs with i < j
    Theta: np.ndarray = field(repr=False)
    threshold: float = 5e-4

    def neighbors(self, node: Hashable) -> list:
        k = self.nodes.index(node)
        idx = sorted({j for e in self.edges if k in e for j in e if j != k})
        return [self.nodes[j] for j in idx]

    def edge_labels(self) -> list[tuple]:
        return [(self.nodes[i], self.nodes[j]) for i, j in sorted(self.edges)]


class LassoSolution(NamedTuple):
    beta: np.ndarray
    converged: bool
    sweeps: int


class FeatureSelection(NamedTuple):
    features: list
    fallback: bool


def empirical_covariance(rows: np.ndarray, variable_names: Sequence = ()) -> CovarianceMatrix:
    """Maximum-likelihood covariance: divisor N, centred on the column mean."""
    X = np.asarray(rows, dtype=float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise GlassoError("need an n x p matrix with n >= 2 rows")
    Xc = X - X.mean(axis=0)
    S = Xc.T @ Xc / X.shape[0]
    return CovarianceMatrix((S + S.T) / 2.0, tuple(variable_names))


def standardize(rows: np.ndarray) -> np.ndarray:
    """Centre columns and scale them to unit (population) variance."""
    X = np.asarray(rows, dtype=float)
    Xc = X - X.mean(axis=0)
    sd = Xc.std(axis=0)
    return Xc * np.divide(1.0, sd, out=np.zeros_like(sd), where=sd > 0)


@numba.njit(cache=True)
def _cd_kernel(W11, s12, rho, beta, tol, max_sweeps):
    p = beta.size
    grad = W11 @ beta
    active = np.empty(p, dtype=np.int64)
    full = True
    sweeps = 0
    while sweeps < max_sweeps:
        sweeps += 1
        n_active = 0
        for j in range(p):
            if full or beta[j] != 0.0:
                active[n_active] = j
                n_active += 1
        max_delta = 0.0
        for a in range(n_active):
            j = active[a]
            old = beta[j]
            z = s12[j] - grad[j] + W11[j, j] * old
            if z > rho:
                new = (z - rho) / W11[j, j]
            elif z < -rho:
                new = (z + rho) / W11[j, j]
            else:
                new = 0.0
            if new != old:
                d = new - old
                for k in range(p):
                    grad[k] += W11[j, k] * d
                beta[j] = new
                if abs(d) > max_delta:
                    max_delta = abs(d)
        if max_delta < tol:
            if full:
                return True, sweeps
            full = True
        else:
            full = False
    return False, sweeps


def _cd(W11: np.ndarray, s12: np.ndarray, rho: float, beta: np.ndarray,
        tol: float, max_sweeps: int) -> tuple[bool, int]:
    """Cyclic soft-thresholding coordinate descent in place on ``beta``.

    Full sweeps alternate with sweeps over the nonzero coordinates only; the
    solve is declared converged when a full sweep moves no coordinate by
    ``tol`` or more.
    """
    ok, sweeps = _cd_kernel(np.ascontiguousarray(W11), np.ascontiguousarray(s12),
                            float(rho), beta, float(tol), int(max_sweeps))
    return bool(ok), int(sweeps)


def lasso_subproblem(W11: np.ndarray, s12: np.ndarray, rho: float, inner_tol: float = 1e-10,
                     max_inner_iters: int = 10_000, beta0: np.ndarray | None = None) -> LassoSolution:
    """Solve the column lasso ``min 1/2 b'W11 b - b's12 + rho |b|_1``.

    Raises GlassoError if ``W11`` is not symmetric positive definite.  On hitting
    the sweep cap the last iterate is returned with ``converged=False``.
    """
    W11 = np.asarray(W11, dtype=float)
    s12 = np.asarray(s12, dtype=float)
    if W11.shape != (s12.size, s12.size):
        raise GlassoError("W11 and s12 dimensions disagree")
    if not np.allclose(W11, W11.T, atol=1e-12):
        raise GlassoError("W11 is not symmetric")
    try:
        np.linalg.cholesky(W11)
    except np.linalg.LinAlgError:
        raise GlassoError("W11 is not positive definite") from None
    beta = np.zeros(s12.size) if beta0 is None else np.array(beta0, dtype=float)
    converged, sweeps = _cd(W11, s12, rho, beta, inner_tol, max_inner_iters)
    return LassoSolution(beta, converged, sweeps)


def lasso_objective(W11: np.ndarray, s12: np.ndarray, rho: float, beta: np.ndarray) -> float:
    return float(0.5 * beta @ W11 @ beta - beta @ s12 + rho * np.abs(beta).sum())


def glasso(S: CovarianceMatrix | np.ndarray, cfg: GlassoConfig) -> PrecisionEstimate:
    """Sparse inverse covariance estimate of ``S`` with penalty ``cfg.rho``.

    Sweeps stop once the mean absolute change of the off-diagonal ``W`` is
    below ``outer_tol`` and ``max |W Theta - I|`` is below ``duality_tol``.
    """
    if not isinstance(S, CovarianceMatrix):
        S = CovarianceMatrix(np.asarray(S, dtype=float))
    Smat, p, rho = S.entries, S.dim, cfg.rho
    if p < 2:
        raise GlassoError("glasso needs p >= 2")
    if rho == 0.0:
        try:
            np.linalg.cholesky(Smat)
        except np.linalg.LinAlgError:
            raise GlassoError("rho = 0 requires a positive definite covariance") from None

    off = ~np.eye(p, dtype=bool)
    tol = cfg.outer_tol
    if tol is None:
        tol = 1e-4 * float(np.abs(Smat[off]).mean()) or 1e-12

    W = Smat + rho * np.eye(p)
    Theta = np.zeros((p, p))
    betas = np.zeros((p, p - 1))
    converged = False
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        W_prev = W.copy()
        for i in range(p):
            idx = np.r_[0:i, i + 1:p]
            W11 = W[np.ix_(idx, idx)]
            beta = betas[i]
            ok, _ = _cd(W11, Smat[idx, i], rho, beta, cfg.inner_tol, cfg.max_inner_iters)
            if not ok:
                logger.debug("column %d lasso hit the sweep cap", i)
            w12 = W11 @ beta
            W[idx, i] = w12
            W[i, idx] = w12
            theta22 = 1.0 / (W[i, i] - w12 @ beta)
            Theta[i, i] = theta22
            Theta[idx, i] = -beta * theta22
        change = float(np.abs(W - W_prev)[off].mean())
        # Theta columns built early in a sweep lag the later W updates, so a
        # small change in W alone can still leave W Theta visibly off I.
        if change < tol and np.abs(W @ ((Theta + Theta.T) / 2) - np.eye(p)).max() < cfg.duality_tol:
            converged = True
            break
    if not converged:
        logger.warning("glasso did not converge in %d sweeps", cfg.max_outer_iters)
    Theta = (Theta + Theta.T) / 2.0
    return PrecisionEstimate(W, Theta, it, converged, S.variable_names)


def kkt_residual(S: CovarianceMatrix | np.ndarray, estimate: PrecisionEstimate, rho: float) -> float:
    """Largest breach of the penalised-likelihood stationarity conditions.

    Off-diagonal: ``W_ij - S_ij = rho * sign(Theta_ij)`` where ``Theta_ij != 0``,
    else ``|W_ij - S_ij| <= rho``.  Diagonal: ``W_ii = S_ii + rho``.
    """
    Smat = S.entries if isinstance(S, CovarianceMatrix) else np.asarray(S, dtype=float)
    W, Theta = estimate.W, estimate.Theta
    p = Smat.shape[0]
    D = W - Smat
    off = ~np.eye(p, dtype=bool)
    scale = float(np.abs(np.diag(Theta)).max()) or 1.0
    nonzero = np.abs(Theta) > 1e-12 * scale
    breach = np.zeros((p, p))
    active = nonzero & off
    breach[active] = np.abs(D[active] - rho * np.sign(Theta[active]))
    inactive = ~nonzero & off
    breach[inactive] = np.maximum(np.abs(D[inactive]) - rho, 0.0)
    diag = np.abs(np.diag(D) - rho)
    return float(max(breach.max(initial=0.0), diag.max()))


def extract_graph(estimate: PrecisionEstimate, threshold: float = 5e-4,
                  nodes: Sequence | None = None) -> GraphicalModel:
    """Undirected graph with edge (i, j) iff ``|Theta_ij| >= threshold``."""
    if threshold < 0:
        raise GlassoError("threshold must be >= 0")
    Theta = estimate.Theta
    p = Theta.shape[0]
    if nodes is None:
        nodes = estimate.variable_names or tuple(range(p))
    mask = np.triu(np.abs(Theta) >= threshold, k=1)
    edges = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(mask)))
    return GraphicalModel(tuple(nodes), edges, Theta, threshold)


def select_features(graph: GraphicalModel, target: tuple, allowed_lags=range(1, 6)) -> FeatureSelection:
    """Lagged neighbours of the ``(link, 0)`` node ``target``.

    Nodes are ``(link, lag)`` pairs; other links' lag-0 nodes are never
    returned.  An empty neighbourhood falls back to the target link's own lags
    with ``fallback=True``.
    """
    if target not in graph.nodes:
        raise GlassoError(f"target {target} not in graph")
    allowed = set(allowed_lags)
    feats = [n for n in graph.neighbors(target) if n[1] in allowed]
    if feats:
        return FeatureSelection(feats, False)
    link = target[0]
    logger.warning("empty GL neighbourhood for %s; using its own lags", link)
    return FeatureSelection([(link, j) for j in sorted(allowed, reverse=True)], True)


def variable_label(node) -> str:
    if isinstance(node, tuple) and len(node) == 2:
        link, lag = node
        return f"{link}(t)" if lag == 0 else f"{link}(t-{lag})"
    return str(node)


def to_dot(graph: GraphicalModel, name: str = "glasso") -> str:
    lines = [f"graph {name} {{"]
    for node in graph.nodes:
        lines.append(f'  "{variable_label(node)}";')
    for a, b in graph.edge_labels():
        lines.append(f'  "{variable_label(a)}" -- "{variable_label(b)}";')
    lines.append("}")
    return "\n".join(lines) + "\n"


def write_theta_csv(estimate: PrecisionEstimate, path: str | Path, nodes: Sequence | None = None) -> None:
    p = estimate.Theta.shape[0]
    nodes = nodes or estimate.variable_names or tuple(range(p))
    labels = [variable_label(n) for n in nodes]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variable", *labels])
        for label, row in zip(labels, estimate.Theta):
            w.writerow([label, *(f"{v:.6g}" for v in row)])


def read_covariance_csv(path: str | Path) -> CovarianceMatrix:
    """Square CSV with a header row and a leading name column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = rows[0][1:]
    entries = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return CovarianceMatrix(entries, tuple(names))
