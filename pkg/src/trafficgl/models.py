"""End-to-end runs of the seven forecasting approaches.

All approaches forecast one step ahead and are scored on the same target
indices ``train_samples .. len(series) - 1``.  A dataset row is used for
training only if every one of its targets (including MTL's ``t(n+1)``) lies
before ``train_samples``.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, glasso, gpr, nn
from .data import FlowSeries, LinkId, RoadNetwork, SupervisedDataset

logger = logging.getLogger(__name__)


class Approach(str, Enum):
    SSTL = "SSTL"
    SMTL = "SMTL"
    MSTL = "MSTL"
    MMTL = "MMTL"
    GPR = "GPR"
    GL_NN = "GL_NN"
    HIST_AVG = "HIST_AVG"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, text: str) -> "Approach":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ValueError(f"unknown approach {text!r}; choose from "
                             + ", ".join(a.value for a in cls)) from None


class ModelError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunSettings:
    """Settings shared by every approach of one run."""

    lag: int = 5
    train_samples: int = 2112
    seed: int = 0
    jobs: int = 1
    nn_config: nn.TrainConfig = nn.TrainConfig()
    hidden_candidates: tuple[int, ...] = tuple(range(1, 11))
    rho: float | None = None  # GL_NN needs rho or rho_grid
    rho_grid: tuple[float, ...] = ()
    zero_threshold: float = 5e-4
    deseasonalize_gl: bool = True
    glasso_max_outer_iters: int = 100
    glasso_max_inner_iters: int = 10000
    gpr_opt_rows: int = 300
    gpr_steps: int = 200

    def __post_init__(self):
        data._check_lag(self.lag)
        if self.train_samples < 1:
            raise ValueError("train_samples must be >= 1")
        if (self.rho is not None and self.rho < 0) or any(r < 0 for r in self.rho_grid):
            raise ValueError("rho must be >= 0")
        if self.zero_threshold < 0:
            raise ValueError("zero_threshold must be >= 0")
        if not self.hidden_candidates or not all(1 <= a <= 10 for a in self.hidden_candidates):
            raise ValueError("hidden_candidates must be a non-empty subset of 1..10")
        if self.gpr_opt_rows < 2:
            raise ValueError("gpr_opt_rows must be >= 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("jobs")  # scheduling only, never changes the output
        d["hidden_candidates"] = list(self.hidden_candidates)
        d["rho_grid"] = list(self.rho_grid)
        return d


def task_seed(base_seed: int, task: str) -> int:
    """Per-task seed: ``base_seed`` XOR the CRC-32 of the task name."""
    return (int(base_seed) ^ zlib.crc32(task.encode("utf-8"))) & 0xFFFFFFFF


@dataclass
class ForecastResult:
    approach: str
    links: list[LinkId]
    sample_index: np.ndarray
    actual: dict[LinkId, np.ndarray]
    predicted: dict[LinkId, np.ndarray]
    variance: dict[LinkId, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    converged: bool = True

    def __post_init__(self):
        for link in self.links:
            if len(self.actual[link]) != len(self.sample_index) or \
                    len(self.predicted[link]) != len(self.sample_index):
                raise ModelError(f"{self.approach}: series lengths differ on link {link}")

    def to_json(self) -> str:
        doc = {
            "approach": str(self.approach),
            "links": [str(l) for l in self.links],
            "sample_index": [int(i) for i in self.sample_index],
            "actual": {str(l): self.actual[l].tolist() for l in self.links},
            "predicted": {str(l): self.predicted[l].tolist() for l in self.links},
            "variance": None if self.variance is None else
            {str(l): self.variance[l].tolist() for l in self.links},
            "metadata": self.metadata,
            "warnings": self.warnings,
            "converged": self.converged,
        }
        return json.dumps(doc, indent=1, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ForecastResult":
        doc = json.loads(text)
        links = [LinkId.parse(s) for s in doc["links"]]
        arr = lambda m: {LinkId.parse(k): np.asarray(v, dtype=float) for k, v in m.items()}
        return cls(doc["approach"], links, np.asarray(doc["sample_index"], dtype=int),
                   arr(doc["actual"]), arr(doc["predicted"]),
                   None if doc.get("variance") is None else arr(doc["variance"]),
                   doc.get("metadata", {}), list(doc.get("warnings", [])),
                   bool(doc.get("converged", True)))

    def write_csv(self, out_dir: str | Path) -> list[Path]:
        """One ``<approach>_<link>.csv`` per link: ``index,actual,predicted[,variance]``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for link in self.links:
            cols = [self.sample_index, self.actual[link], self.predicted[link]]
            header = "index,actual,predicted"
            if self.variance is not None:
                cols.append(self.variance[link])
                header += ",variance"
            lines = [header]
            for row in zip(*cols):
                lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
            path = out / f"{self.approach}_{link}.csv"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths.append(path)
        return paths

    def write_bands(self, out_dir: str | Path, z: float = 1.96) -> list[Path]:
        """Per-link ``index,actual,mean,lower,upper`` files (needs variances)."""
        if self.variance is None:
            raise ModelError(f"{self.approach} has no predictive variance")
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for link in self.links:
            dist = gpr.PredictiveDistribution(self.predicted[link], self.variance[link], True)
            lo, hi = gpr.predictive_band(dist, z)
            lines = ["index,actual,mean,lower,upper"]
            for i, a, m, l, u in zip(self.sample_index, self.actual[link], dist.mean, lo, hi):
                lines.append(f"{int(i)},{float(a)!r},{float(m)!r},{float(l)!r},{float(u)!r}")
            path = out / f"band_{link}.csv"
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths.append(path)
        return paths


def band_coverage(result: ForecastResult, z: float = 1.96) -> dict[LinkId, float]:
    """Fraction of actuals inside ``mean ± z sd`` for each link."""
    if result.variance is None:
        raise ModelError(f"{result.approach} has no predictive variance")
    cov = {}
    for link in result.links:
        half = z * np.sqrt(result.variance[link])
        err = np.abs(result.actual[link] - result.predicted[link])
        cov[link] = float(np.mean(err <= half))
    return cov


# --- shared plumbing -----------------------------------------------------------

def _check_inputs(series: FlowSeries, network: RoadNetwork, cfg: RunSettings) -> np.ndarray:
    missing = [str(l) for l in network.links if l not in series.values]
    if missing:
        raise ModelError("flows missing for links: " + ", ".join(missing))
    if len(series) <= cfg.train_samples:
        raise ModelError(f"series has {len(series)} samples; need more than "
                         f"train_samples={cfg.train_samples} to leave a test range")
    if cfg.train_samples < series.samples_per_day:
        raise ModelError("the training range must cover at least one full day")
    return np.arange(cfg.train_samples, len(series))


def _map(fn, tasks: Sequence, jobs: int) -> list:
    if jobs == 1 or len(tasks) < 2:
        return [fn(*t) for t in tasks]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=jobs)(delayed(fn)(*t) for t in tasks)


@dataclass(frozen=True)
class _NetOutcome:
    predictions: np.ndarray  # (n_test, n_main) in vehicles/hour
    a: int
    n_hidden: int
    n_inputs: int
    seed: int
    stop_reason: str
    val_rmse: float  # main targets of the validation tail, vehicles/hour


def _train_predict_net(ds: SupervisedDataset, test_inputs: np.ndarray, cfg: RunSettings,
                       seed: int, label: str) -> _NetOutcome:
    """Scale, choose ``a`` on the validation tail, train, predict and de-scale."""
    n_train = data.rows_before(ds, cfg.train_samples)
    frac = cfg.nn_config.val_fraction
    n_val = max(1, int(round(frac * n_train))) if frac > 0 else 1
    if n_train - n_val < 2:
        raise ModelError(f"{label}: only {n_train} training rows")
    train = ds.take(slice(0, n_train))
    scaler = data.fit_scaler(train, "minmax")
    scaled = data.apply(scaler, train)
    fit_part = scaled.take(slice(0, n_train - n_val))
    val_part = scaled.take(slice(n_train - n_val, None))
    try:
        choice = nn.select_architecture(fit_part, val_part, nn.with_seed(cfg.nn_config, seed),
                                        cfg.hidden_candidates)
    except nn.TrainingError as exc:
        raise ModelError(f"{label}: {exc}") from exc
    main = list(ds.main_target_columns)
    val_pred = data.invert_targets(scaler, nn.forward(choice.net, val_part.inputs))[:, main]
    val_err = val_pred - train.targets[n_train - n_val:, main]
    out = nn.forward(choice.net, data.scale_inputs(scaler, test_inputs))
    pred = data.invert_targets(scaler, out)[:, main]
    return _NetOutcome(pred, choice.a, choice.net.topology.n_hidden, ds.inputs.shape[1],
                       seed, choice.history.stop_reason, float(np.sqrt(np.mean(val_err ** 2))))


def _assemble(approach: Approach, series: FlowSeries, network: RoadNetwork, test_idx: np.ndarray,
              preds: dict[LinkId, np.ndarray], metadata: dict, cfg: RunSettings,
              variance: dict | None = None, warnings: list[str] | None = None,
              converged: bool = True) -> ForecastResult:
    links = network.links
    meta = {"settings": cfg.to_dict(), **metadata}
    return ForecastResult(str(approach), links, test_idx.copy(),
                          {l: np.array(series[l][test_idx]) for l in links},
                          {l: np.asarray(preds[l], dtype=float) for l in links},
                          variance, meta, warnings or [], converged)


# --- neural-network approaches -------------------------------------------------------

def _single_link_task(series, link, cfg, task, test_idx, seed):
    ds = data.build_single_link_dataset(series, link, cfg.lag, task)
    return _train_predict_net(ds, data.window_inputs(series, ds.input_names, test_idx),
                              cfg, seed, f"link {link}")


def _junction_task(series, network, junction, cfg, task, test_idx, seed):
    ds = data.build_multi_link_dataset(series, network, junction, cfg.lag, task)
    return _train_predict_net(ds, data.window_inputs(series, ds.input_names, test_idx),
                              cfg, seed, f"junction {junction}")


def _net_meta(o: _NetOutcome) -> dict:
    return {"a": o.a, "hidden": o.n_hidden, "inputs": o.n_inputs, "seed": o.seed,
            "stop": o.stop_reason, "val_rmse": o.val_rmse}


def run_single_link(approach: Approach, series: FlowSeries, network: RoadNetwork,
                    cfg: RunSettings) -> ForecastResult:
    """SSTL / SMTL: one network per link on its own history."""
    task = {Approach.SSTL: "STL", Approach.SMTL: "MTL"}[approach]
    test_idx = _check_inputs(series, network, cfg)
    links = network.links
    tasks = [(series, l, cfg, task, test_idx, task_seed(cfg.seed, f"{approach}:{l}"))
             for l in links]
    outs = _map(_single_link_task, tasks, cfg.jobs)
    preds = {l: o.predictions[:, 0] for l, o in zip(links, outs)}
    meta = {"nets": {str(l): _net_meta(o) for l, o in zip(links, outs)}}
    return _assemble(approach, series, network, test_idx, preds, meta, cfg)


def run_multi_link(approach: Approach, series: FlowSeries, network: RoadNetwork,
                   cfg: RunSettings) -> ForecastResult:
    """MSTL / MMTL: one network per junction predicting all of its links."""
    task = {Approach.MSTL: "STL", Approach.MMTL: "MTL"}[approach]
    test_idx = _check_inputs(series, network, cfg)
    juncs = list(network.junctions)
    tasks = [(series, network, j, cfg, task, test_idx, task_seed(cfg.seed, f"{approach}:{j}"))
             for j in juncs]
    outs = _map(_junction_task, tasks, cfg.jobs)
    preds = {}
    for j, o in zip(juncs, outs):
        for c, link in enumerate(network.membership[j]):
            preds[link] = o.predictions[:, c]
    meta = {"nets": {j: _net_meta(o) for j, o in zip(juncs, outs)}}
    return _assemble(approach, series, network, test_idx, preds, meta, cfg)


# --- historical average ------------------------------------------------------------

def slot_means(series: FlowSeries, links: Sequence[LinkId], train_samples: int) -> np.ndarray:
    """``(samples_per_day, n_links)`` time-of-day means over the training range."""
    per_day = series.samples_per_day
    slots = (series.start_index + np.arange(train_samples)) % per_day
    counts = np.bincount(slots, minlength=per_day)
    if np.any(counts == 0):
        raise ModelError(f"time-of-day slot {int(np.argmin(counts))} has no training samples")
    X = series.matrix(links)[:train_samples]
    sums = np.zeros((per_day, len(links)))
    np.add.at(sums, slots, X)
    return sums / counts[:, None]


def run_hist_avg(series: FlowSeries, network: RoadNetwork, cfg: RunSettings) -> ForecastResult:
    """Each test sample is predicted by its time-of-day slot mean over the training days."""
    test_idx = _check_inputs(series, network, cfg)
    links = network.links
    means = slot_means(series, links, cfg.train_samples)
    slots = (series.start_index + test_idx) % series.samples_per_day
    preds = {l: means[slots, i] for i, l in enumerate(links)}
    meta = {"definition": "mean of training samples at the same time-of-day slot "
                          f"({series.samples_per_day} slots per day)"}
    return _assemble(Approach.HIST_AVG, series, network, test_idx, preds, meta, cfg)


# --- Gaussian process ---------------------------------------------------------------

def _gpr_task(series, link, cfg, test_idx):
    ds = data.build_single_link_dataset(series, link, cfg.lag, "STL")
    n_train = data.rows_before(ds, cfg.train_samples)
    train = ds.take(slice(0, n_train))
    scaler = data.fit_scaler(train, "standard")
    tr = data.apply(scaler, train)
    X, y = tr.inputs, tr.targets[:, 0]
    k = min(cfg.gpr_opt_rows, n_train)
    try:
        params = gpr.optimize_hyperparams(X[-k:], y[-k:], gpr.KernelParams.default(X.shape[1]),
                                          steps=cfg.gpr_steps)
        model = gpr.fit(X, y, params)
    except gpr.GPRError as exc:
        raise ModelError(f"link {link}: {exc}") from exc
    Xs = data.scale_inputs(scaler, data.window_inputs(series, ds.input_names, test_idx))
    dist = gpr.predict(model, Xs, include_noise=True)
    span = float(scaler.out_span[0]) or 1.0
    mean = data.invert_targets(scaler, dist.mean[:, None])[:, 0]
    return mean, dist.variance * span * span, params.to_dict(), model.jitter


def run_gpr(series: FlowSeries, network: RoadNetwork, cfg: RunSettings) -> ForecastResult:
    """One GP per link on the single-link inputs; variances are of a new observation."""
    test_idx = _check_inputs(series, network, cfg)
    links = network.links
    outs = _map(_gpr_task, [(series, l, cfg, test_idx) for l in links], cfg.jobs)
    preds = {l: o[0] for l, o in zip(links, outs)}
    var = {l: o[1] for l, o in zip(links, outs)}
    meta = {"hyperparameters": {str(l): o[2] for l, o in zip(links, outs)},
            "jitter": {str(l): o[3] for l, o in zip(links, outs) if o[3]},
            "optimised_on_last_rows": cfg.gpr_opt_rows}
    return _assemble(Approach.GPR, series, network, test_idx, preds, meta, cfg, variance=var)


# --- graphical lasso + NN -------------------------------------------------------------

@dataclass(frozen=True)
class GlFit:
    nodes: tuple[tuple[LinkId, int], ...]
    estimate: glasso.PrecisionEstimate
    graph: glasso.GraphicalModel
    rho: float


def gl_nodes(links: Sequence[LinkId], lag: int) -> list[tuple[LinkId, int]]:
    """Variable universe: for each link, lags ``lag .. 0``."""
    return [(l, j) for l in links for j in range(lag, -1, -1)]


def gl_variable_matrix(series: FlowSeries, links: Sequence[LinkId], cfg: RunSettings) -> np.ndarray:
    """Standardised ``(rows, links*(lag+1))`` matrix over training rows ``n in [lag, train)``.

    With ``cfg.deseasonalize_gl`` the time-of-day training mean is removed from
    every flow first, so the estimated dependencies are those of the deviations
    from the daily profile.
    """
    X = series.matrix(links)[:cfg.train_samples].astype(float)
    if cfg.deseasonalize_gl:
        means = slot_means(series, links, cfg.train_samples)
        X = X - means[(series.start_index + np.arange(cfg.train_samples)) % series.samples_per_day]
    idx = np.arange(cfg.lag, cfg.train_samples)
    cols = [X[idx - j, i] for i in range(len(links)) for j in range(cfg.lag, -1, -1)]
    return glasso.standardize(np.column_stack(cols))


def fit_gl_graph(series: FlowSeries, links: Sequence[LinkId], cfg: RunSettings,
                 rho: float | None = None) -> GlFit:
    """Sparse precision matrix of the lagged-flow variables over the training rows."""
    if len(links) < 2:
        raise ModelError("GL_NN needs at least two links")
    rho = cfg.rho if rho is None else rho
    if rho is None:
        raise ModelError("GL_NN needs a penalty: set rho or rho_grid")
    nodes = tuple(gl_nodes(links, cfg.lag))
    S = glasso.empirical_covariance(gl_variable_matrix(series, links, cfg), nodes)
    est = glasso.glasso(S, glasso.GlassoConfig(rho, max_outer_iters=cfg.glasso_max_outer_iters,
                                               max_inner_iters=cfg.glasso_max_inner_iters,
                                               zero_threshold=cfg.zero_threshold))
    graph = glasso.extract_graph(est, cfg.zero_threshold, nodes)
    return GlFit(nodes, est, graph, rho)


def _gl_task(series, link, features, cfg, test_idx, seed):
    ds = data.build_gl_dataset(series, features, link, cfg.lag)
    return _train_predict_net(ds, data.window_inputs(series, ds.input_names, test_idx),
                              cfg, seed, f"link {link}")


def _gl_nn_once(series: FlowSeries, network: RoadNetwork, cfg: RunSettings, test_idx: np.ndarray,
                fit: GlFit):
    links = network.links
    selections = {l: glasso.select_features(fit.graph, (l, 0), range(1, cfg.lag + 1))
                  for l in links}
    tasks = [(series, l, selections[l].features, cfg, test_idx,
              task_seed(cfg.seed, f"{Approach.GL_NN}:{l}")) for l in links]
    outs = _map(_gl_task, tasks, cfg.jobs)
    return selections, dict(zip(links, outs))


def run_gl_nn(series: FlowSeries, network: RoadNetwork, cfg: RunSettings,
              gl_fit: GlFit | None = None) -> ForecastResult:
    """Graph-neighbour features from the graphical lasso feeding one network per link.

    With ``cfg.rho_grid`` (and no ``gl_fit``) the whole pipeline runs once per
    penalty and the one with the lowest summed validation RMSE is kept; ties go
    to the larger penalty.
    """
    test_idx = _check_inputs(series, network, cfg)
    links = network.links
    if gl_fit is not None:
        candidates = [gl_fit]
    elif cfg.rho_grid:
        candidates = [fit_gl_graph(series, links, cfg, r) for r in sorted(set(cfg.rho_grid))]
    else:
        candidates = [fit_gl_graph(series, links, cfg)]
    scores = {}
    best = None
    for fit in candidates:
        selections, outs = _gl_nn_once(series, network, cfg, test_idx, fit)
        score = float(sum(o.val_rmse for o in outs.values()))
        scores[repr(fit.rho)] = score
        if best is None or score <= best[0]:
            best = (score, fit, selections, outs)
    _, fit, selections, outs = best

    warnings = []
    if not fit.estimate.converged:
        warnings.append(f"glasso did not converge in {fit.estimate.iterations_used} sweeps; "
                        "using the last iterate")
    warnings += [f"link {l}: empty graph neighbourhood, using its own lags"
                 for l in links if selections[l].fallback]
    preds = {l: outs[l].predictions[:, 0] for l in links}
    sizes = [len(selections[l].features) for l in links]
    meta = {
        "rho": fit.rho,
        "rho_validation_rmse_sum": scores if len(scores) > 1 else {},
        "glasso_iterations": fit.estimate.iterations_used,
        "glasso_converged": fit.estimate.converged,
        "n_variables": len(fit.nodes),
        "n_edges": len(fit.graph.edges),
        "mean_selection_size": float(np.mean(sizes)),
        "selected_features": {str(l): [glasso.variable_label(n) for n in selections[l].features]
                              for l in links},
        "fallback_links": [str(l) for l in links if selections[l].fallback],
        "nets": {str(l): _net_meta(outs[l]) for l in links},
    }
    return _assemble(Approach.GL_NN, series, network, test_idx, preds, meta, cfg,
                     warnings=warnings, converged=fit.estimate.converged)


def run_approach(approach: Approach | str, series: FlowSeries, network: RoadNetwork,
                 cfg: RunSettings) -> ForecastResult:
    approach = Approach.parse(str(approach))
    if approach in (Approach.SSTL, Approach.SMTL):
        return run_single_link(approach, series, network, cfg)
    if approach in (Approach.MSTL, Approach.MMTL):
        return run_multi_link(approach, series, network, cfg)
    if approach is Approach.GPR:
        return run_gpr(series, network, cfg)
    if approach is Approach.GL_NN:
        return run_gl_nn(series, network, cfg)
    return run_hist_avg(series, network, cfg)
