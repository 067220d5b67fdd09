"""Road-network topology, flow series, synthetic data and windowed datasets.

Every dataset row is indexed by the absolute sample index ``n`` of its main
target.  An input column labelled ``(link, j)`` holds the flow of ``link`` at
``n - j``; a target column labelled ``(link, k)`` holds the flow at ``n + k``.
"""

from __future__ import annotations

import csv
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, NamedTuple, Sequence

import numpy as np

SAMPLES_PER_DAY = 96
MAX_LAG = 5
MTL_OFFSETS = (-1, 0, 1)

Task = Literal["STL", "MTL"]


class DataError(ValueError):
    """Malformed flow data, topology or dataset request."""


@dataclass(frozen=True, order=True)
class LinkId:
    """A road link, e.g. ``Ba`` is link ``a`` of junction ``B``."""

    junction: str
    slot: str

    def __post_init__(self):
        if not self.junction or not self.slot:
            raise DataError(f"empty link label: {self.junction!r}/{self.slot!r}")

    def __str__(self) -> str:
        return self.junction + self.slot

    @classmethod
    def parse(cls, text: str, junction: str | None = None) -> "LinkId":
        text = text.strip()
        if junction is not None:
            if text.startswith(junction) and len(text) > len(junction):
                return cls(junction, text[len(junction):])
            return cls(junction, text)
        # Junction label is the leading run of upper-case letters/digits.
        k = 0
        while k < len(text) and (text[k].isupper() or text[k].isdigit()):
            k += 1
        if k == 0 or k == len(text):
            raise DataError(f"cannot split link label {text!r} into junction and slot")
        return cls(text[:k], text[k:])


@dataclass(frozen=True)
class RoadNetwork:
    junctions: tuple[str, ...]
    membership: dict[str, tuple[LinkId, ...]]
    downstream: dict[LinkId, tuple[LinkId, ...]] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[LinkId] = set()
        for j in self.junctions:
            members = self.membership.get(j)
            if not members:
                raise DataError(f"junction {j} has no links")
            for link in members:
                if link in seen:
                    raise DataError(f"link {link} listed twice")
                seen.add(link)
        if set(self.membership) != set(self.junctions):
            raise DataError("membership keys do not match junction list")
        for src, dsts in self.downstream.items():
            for link in (src, *dsts):
                if link not in seen:
                    raise DataError(f"downstream edge references unknown link {link}")

    @property
    def links(self) -> list[LinkId]:
        return [link for j in self.junctions for link in self.membership[j]]

    def link(self, name: str) -> LinkId:
        for link in self.links:
            if str(link) == name:
                return link
        raise DataError(f"unknown link {name!r}")

    def junction_of(self, link: LinkId) -> str:
        for j in self.junctions:
            if link in self.membership[j]:
                return j
        raise DataError(f"unknown link {link}")

    def upstream(self, link: LinkId) -> list[LinkId]:
        """Links whose downstream list contains ``link``, in network order."""
        return [src for src in self.links if link in self.downstream.get(src, ())]


def make_network(links_per_junction: Sequence[int], first_label: str = "B") -> RoadNetwork:
    """Build a network with generic labels and the synthetic flow topology.

    Within a junction link ``i`` feeds link ``i-1`` (a ring), and link ``i`` of
    each junction also feeds link ``i mod k`` of the next junction.
    """
    letters = string.ascii_uppercase
    start = letters.index(first_label)
    if start + len(links_per_junction) > len(letters):
        raise DataError("too many junctions for single-letter labels")
    membership = {}
    for offset, k in enumerate(links_per_junction):
        if k < 1:
            raise DataError("every junction needs at least one link")
        j = letters[start + offset]
        membership[j] = tuple(LinkId(j, string.ascii_lowercase[s]) for s in range(k))
    return _with_synthetic_flows(tuple(membership), membership)


def default_network() -> RoadNetwork:
    """The 31-link, 10-junction layout used throughout the experiments."""
    names = {
        "B": "abc", "C": "efgh", "D": "abcd", "E": "bd", "F": "efgh",
        "G": "bd", "H": "ikl", "I": "abd", "J": "hf", "K": "abcd",
    }
    membership = {j: tuple(LinkId(j, s) for s in slots) for j, slots in names.items()}
    return _with_synthetic_flows(tuple(names), membership)


def _with_synthetic_flows(junctions, membership) -> RoadNetwork:
    downstream: dict[LinkId, list[LinkId]] = {}
    for pos, j in enumerate(junctions):
        members = membership[j]
        k = len(members)
        nxt = membership[junctions[(pos + 1) % len(junctions)]]
        for i, link in enumerate(members):
            out = downstream.setdefault(link, [])
            if k > 1:
                out.append(members[i - 1])
            if len(junctions) > 1:
                out.append(nxt[i % len(nxt)])
    return RoadNetwork(
        junctions=tuple(junctions),
        membership=dict(membership),
        downstream={src: tuple(dst) for src, dst in downstream.items() if dst},
    )


def read_topology(path: str | Path) -> RoadNetwork:
    """Parse ``J: Ja Jb`` junction lines and an optional ``->`` edge section."""
    junctions: list[str] = []
    membership: dict[str, tuple[LinkId, ...]] = {}
    edges: list[tuple[str, list[str]]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "->" in line:
            src, dst = line.split("->", 1)
            edges.append((src.strip(), dst.split()))
        elif ":" in line:
            j, rest = line.split(":", 1)
            j = j.strip()
            if not j or j in membership:
                raise DataError(f"{path}:{lineno}: bad or duplicate junction {j!r}")
            junctions.append(j)
            membership[j] = tuple(LinkId.parse(tok, j) for tok in rest.split())
        else:
            raise DataError(f"{path}:{lineno}: cannot parse {raw!r}")
    by_name = {str(link): link for j in junctions for link in membership[j]}
    downstream = {}
    for src, dsts in edges:
        try:
            downstream[by_name[src]] = tuple(by_name[d] for d in dsts)
        except KeyError as exc:
            raise DataError(f"downstream edge references unknown link {exc.args[0]}") from None
    return RoadNetwork(tuple(junctions), membership, downstream)


def write_topology(network: RoadNetwork, path: str | Path) -> None:
    lines = [f"{j}: " + " ".join(str(l) for l in network.membership[j]) for j in network.junctions]
    for src in network.links:
        dsts = network.downstream.get(src)
        if dsts:
            lines.append(f"{src} -> " + " ".join(str(d) for d in dsts))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class FlowSeries:
    values: dict[LinkId, np.ndarray]
    interval_minutes: int = 15
    start_index: int = 0

    def __post_init__(self):
        if self.interval_minutes <= 0:
            raise DataError("interval_minutes must be positive")
        lengths = {len(v) for v in self.values.values()}
        if len(lengths) > 1:
            raise DataError("ragged series")
        frozen = {}
        for link, v in self.values.items():
            arr = np.array(v, dtype=float)
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise DataError(f"negative flow on link {link}")
            arr.flags.writeable = False
            frozen[link] = arr
        object.__setattr__(self, "values", frozen)

    @property
    def links(self) -> list[LinkId]:
        return list(self.values)

    def __len__(self) -> int:
        return len(next(iter(self.values.values()))) if self.values else 0

    def __getitem__(self, link: LinkId) -> np.ndarray:
        return self.values[link]

    @property
    def samples_per_day(self) -> int:
        return 24 * 60 // self.interval_minutes

    def matrix(self, links: Sequence[LinkId] | None = None) -> np.ndarray:
        """Time × link array."""
        links = self.links if links is None else links
        return np.column_stack([self.values[l] for l in links])


def load_flows(path: str | Path, interval_minutes: int = 15) -> FlowSeries:
    """Read a ``sample_index,link_id,flow`` CSV into an aligned series."""
    cells: dict[str, dict[int, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["sample_index", "link_id", "flow"]:
            raise DataError(f"{path}: expected header sample_index,link_id,flow")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                idx, name, flow = int(row[0]), row[1].strip(), float(row[2])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if flow < 0:
                raise DataError(f"{path}:{lineno}: negative flow {flow}")
            per_link = cells.setdefault(name, {})
            if idx in per_link:
                raise DataError(f"{path}:{lineno}: duplicate sample {idx} for {name}")
            per_link[idx] = flow
    if not cells:
        raise DataError(f"{path}: no data rows")
    index_sets = {frozenset(v) for v in cells.values()}
    if len(index_sets) != 1:
        raise DataError(f"{path}: ragged series")
    indices = sorted(next(iter(index_sets)))
    start = indices[0]
    if indices != list(range(start, start + len(indices))):
        raise DataError(f"{path}: ragged series (gap in sample indices)")
    values = {LinkId.parse(name): np.array([v[i] for i in indices]) for name, v in cells.items()}
    return FlowSeries(values, interval_minutes=interval_minutes, start_index=start)


def write_flows(series: FlowSeries, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("sample_index,link_id,flow\n")
        for link in series.links:
            name = str(link)
            for i, v in enumerate(series[link]):
                fh.write(f"{series.start_index + i},{name},{float(v)!r}\n")


# --- synthetic generator -----------------------------------------------------

def _profile_params(network: RoadNetwork, rng: np.random.Generator) -> dict[str, np.ndarray]:
    n = len(network.links)
    return {
        "level": rng.uniform(300.0, 900.0, n),
        "amp1": rng.uniform(0.35, 0.6, n),
        "phase1": rng.uniform(-0.3, 0.3, n),
        "amp2": rng.uniform(0.05, 0.2, n),
        "phase2": rng.uniform(-0.5, 0.5, n),
    }


def _profiles(params, n_samples: int, per_day: int) -> np.ndarray:
    s = np.arange(n_samples)[:, None]
    w = 2.0 * np.pi * s / per_day
    shape = (1.0 + params["amp1"] * np.sin(w - np.pi / 2 + params["phase1"])
             + params["amp2"] * np.sin(2 * w + params["phase2"]))
    return params["level"] * shape


def base_profiles(network: RoadNetwork, days: int, seed: int) -> np.ndarray:
    """Deterministic daily profile of every link (time × link), no coupling or noise."""
    rng = np.random.default_rng(seed)
    return _profiles(_profile_params(network, rng), days * SAMPLES_PER_DAY, SAMPLES_PER_DAY)


def generate_synthetic(
    network: RoadNetwork,
    days: int,
    seed: int,
    coupling: float = 0.4,
    noise_std: float = 50.0,
    noise_ar: float = 0.6,
) -> FlowSeries:
    """Simulate coupled link flows at 15-minute resolution.

    ``flow[t] = profile[t] + coupling * mean(upstream flows at t-1) + noise[t]``
    clipped at zero.  The noise is a stationary Gaussian AR(1) process per link
    with marginal standard deviation ``noise_std`` and lag-1 autocorrelation
    ``noise_ar``; ``noise_ar=0`` gives white noise.
    """
    links = network.links
    if not links:
        raise DataError("empty network")
    if days < 1:
        raise DataError("days must be >= 1")
    if not 0.0 <= coupling <= 1.0:
        raise DataError("coupling must lie in [0, 1]")
    if noise_std < 0:
        raise DataError("noise_std must be >= 0")
    if not 0.0 <= noise_ar < 1.0:
        raise DataError("noise_ar must lie in [0, 1)")

    rng = np.random.default_rng(seed)
    params = _profile_params(network, rng)
    T, L = days * SAMPLES_PER_DAY, len(links)
    base = _profiles(params, T + 1, SAMPLES_PER_DAY)
    # row 0 of `base` is the virtual sample t = -1 (profiles are periodic)
    base = np.vstack([base[SAMPLES_PER_DAY - 1:SAMPLES_PER_DAY], base[:T]])
    shocks = rng.standard_normal((T, L))

    pos = {link: i for i, link in enumerate(links)}
    mixing = np.zeros((L, L))
    for link in links:
        ups = network.upstream(link)
        for u in ups:
            mixing[pos[link], pos[u]] = 1.0 / len(ups)

    innov = noise_std * math.sqrt(1.0 - noise_ar ** 2)
    noise = noise_std * shocks[0]
    out = np.empty((T, L))
    prev = base[0]
    for t in range(T):
        if t:
            noise = noise_ar * noise + innov * shocks[t]
        x = base[t + 1] + coupling * (mixing @ prev) + noise
        np.maximum(x, 0.0, out=x)
        out[t] = x
        prev = x
    return FlowSeries({link: out[:, i] for i, link in enumerate(links)})


# --- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class SupervisedDataset:
    inputs: np.ndarray
    targets: np.ndarray
    input_names: tuple[tuple[LinkId, int], ...]
    target_names: tuple[tuple[LinkId, int], ...]
    main_target_columns: tuple[int, ...]
    sample_index: np.ndarray

    def __post_init__(self):
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n or len(self.sample_index) != n:
            raise DataError("row counts of inputs, targets and sample_index differ")
        if self.inputs.shape[1] != len(self.input_names):
            raise DataError("input_names do not match input columns")
        if self.targets.shape[1] != len(self.target_names):
            raise DataError("target_names do not match target columns")
        if not set(self.main_target_columns) <= set(range(self.targets.shape[1])):
            raise DataError("main_target_columns out of range")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def main_targets(self) -> np.ndarray:
        return self.targets[:, list(self.main_target_columns)]

    @property
    def max_target_index(self) -> np.ndarray:
        """Largest absolute sample index touched by any target of each row."""
        return self.sample_index + max(k for _, k in self.target_names)

    def take(self, rows) -> "SupervisedDataset":
        return SupervisedDataset(
            self.inputs[rows], self.targets[rows], self.input_names,
            self.target_names, self.main_target_columns, self.sample_index[rows],
        )

    def with_arrays(self, inputs: np.ndarray, targets: np.ndarray) -> "SupervisedDataset":
        return SupervisedDataset(inputs, targets, self.input_names, self.target_names,
                                 self.main_target_columns, self.sample_index)


def window_inputs(series: FlowSeries, input_names: Sequence[tuple[LinkId, int]],
                  indices: Iterable[int]) -> np.ndarray:
    """Lagged input rows for arbitrary target indices (no target needed)."""
    idx = np.asarray(list(indices), dtype=int)
    if idx.size and (idx.min() - max(j for _, j in input_names) < 0 or idx.max() >= len(series)):
        raise DataError("requested window reaches outside the series")
    out = np.empty((idx.size, len(input_names)))
    for c, (link, lag) in enumerate(input_names):
        out[:, c] = series[link][idx - lag]
    return out


def _build(series: FlowSeries, input_names, target_names, main_cols, lag: int) -> SupervisedDataset:
    offsets = [k for _, k in target_names]
    first, last = lag, len(series) - 1 - max(offsets)
    if last < first:
        raise DataError(f"series too short ({len(series)} samples) for lag {lag} windows")
    idx = np.arange(first, last + 1)
    targets = np.empty((idx.size, len(target_names)))
    for c, (link, k) in enumerate(target_names):
        targets[:, c] = series[link][idx + k]
    return SupervisedDataset(window_inputs(series, input_names, idx), targets,
                             tuple(input_names), tuple(target_names), tuple(main_cols), idx)


def _check_lag(lag: int) -> None:
    if not 1 <= lag <= MAX_LAG:
        raise DataError(f"lag must lie in 1..{MAX_LAG}, got {lag}")


def _targets(links: Sequence[LinkId], task: Task):
    if task == "STL":
        return [(l, 0) for l in links], list(range(len(links)))
    if task == "MTL":
        names = [(l, k) for l in links for k in MTL_OFFSETS]
        return names, [3 * i + 1 for i in range(len(links))]
    raise DataError(f"unknown task {task!r}")


def build_single_link_dataset(series: FlowSeries, link: LinkId, lag: int = 5,
                              task: Task = "STL") -> SupervisedDataset:
    """Own-history dataset: inputs ``t(n-lag)..t(n-1)``; MTL adds ``t(n-1)``, ``t(n+1)`` targets."""
    _check_lag(lag)
    targets, main = _targets([link], task)
    inputs = [(link, j) for j in range(lag, 0, -1)]
    return _build(series, inputs, targets, main, lag)


def build_multi_link_dataset(series: FlowSeries, network: RoadNetwork, junction: str,
                             lag: int = 5, task: Task = "STL") -> SupervisedDataset:
    """All lags of every link in ``junction`` predicting every link of it."""
    _check_lag(lag)
    if junction not in network.membership:
        raise DataError(f"unknown junction {junction!r}")
    links = network.membership[junction]
    targets, main = _targets(links, task)
    inputs = [(l, j) for l in links for j in range(lag, 0, -1)]
    return _build(series, inputs, targets, main, lag)


def build_gl_dataset(series: FlowSeries, selected: Sequence[tuple[LinkId, int]],
                     target: LinkId, lag: int = MAX_LAG) -> SupervisedDataset:
    """Selected lagged variables (in given order) predicting ``target`` at ``n``.

    Rows start at ``n = lag`` regardless of the selection so GL datasets align
    with the single- and multi-link ones.
    """
    if not selected:
        raise DataError("empty feature selection")
    for link, j in selected:
        if not 1 <= j <= lag:
            raise DataError(f"selected lag {j} of {link} outside 1..{lag}")
    return _build(series, list(selected), [(target, 0)], [0], lag)


def split(ds: SupervisedDataset, train_rows: int) -> tuple[SupervisedDataset, SupervisedDataset]:
    """Chronological prefix split."""
    if not 0 < train_rows < len(ds):
        raise DataError(f"train_rows must lie in 1..{len(ds) - 1}, got {train_rows}")
    return ds.take(slice(0, train_rows)), ds.take(slice(train_rows, None))


def rows_before(ds: SupervisedDataset, boundary: int) -> int:
    """Number of leading rows whose targets all lie before sample ``boundary``."""
    return int(np.count_nonzero(ds.max_target_index < boundary))


# --- scaling -----------------------------------------------------------------

@dataclass(frozen=True)
class Scaler:
    """Per-column affine maps for inputs and targets, fit on training rows."""

    mode: Literal["minmax", "standard"]
    in_offset: np.ndarray
    in_span: np.ndarray
    out_offset: np.ndarray
    out_span: np.ndarray

    def to_dict(self) -> dict:
        return {"mode": self.mode, "in_offset": self.in_offset.tolist(),
                "in_span": self.in_span.tolist(), "out_offset": self.out_offset.tolist(),
                "out_span": self.out_span.tolist()}


def _fit_cols(a: np.ndarray, mode: str) -> tuple[np.ndarray, np.ndarray]:
    if mode == "minmax":
        lo = a.min(axis=0)
        return lo, a.max(axis=0) - lo
    if mode == "standard":
        return a.mean(axis=0), a.std(axis=0)
    raise DataError(f"unknown scaler mode {mode!r}")


def fit_scaler(train: SupervisedDataset, mode: Literal["minmax", "standard"] = "minmax") -> Scaler:
    if len(train) == 0:
        raise DataError("cannot fit a scaler on zero rows")
    in_off, in_span = _fit_cols(train.inputs, mode)
    out_off, out_span = _fit_cols(train.targets, mode)
    return Scaler(mode, in_off, in_span, out_off, out_span)


def _forward(a: np.ndarray, offset: np.ndarray, span: np.ndarray) -> np.ndarray:
    if a.shape[-1] != offset.size:
        raise DataError(f"scaler fitted on {offset.size} columns, got {a.shape[-1]}")
    # zero-span columns collapse to 0
    inv = np.divide(1.0, span, out=np.zeros_like(span), where=span != 0)
    return (a - offset) * inv


def scale_inputs(scaler: Scaler, x: np.ndarray) -> np.ndarray:
    return _forward(np.asarray(x, dtype=float), scaler.in_offset, scaler.in_span)


def apply(scaler: Scaler, ds: SupervisedDataset) -> SupervisedDataset:
    return ds.with_arrays(scale_inputs(scaler, ds.inputs),
                          _forward(ds.targets, scaler.out_offset, scaler.out_span))


def invert_targets(scaler: Scaler, predictions: np.ndarray) -> np.ndarray:
    predictions = np.asarray(predictions, dtype=float)
    if predictions.shape[-1] != scaler.out_offset.size:
        raise DataError(f"scaler fitted on {scaler.out_offset.size} target columns, "
                        f"got {predictions.shape[-1]}")
    return scaler.out_offset + predictions * scaler.out_span


# --- correlations ------------------------------------------------------------

class Correlation(NamedTuple):
    junction: str
    link_a: LinkId
    link_b: LinkId
    coef: float  # nan when either series has zero variance

    @property
    def defined(self) -> bool:
        return not math.isnan(self.coef)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float) - np.mean(a)
    b = np.asarray(b, dtype=float) - np.mean(b)
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return math.nan
    return float(np.clip((a @ b) / denom, -1.0, 1.0))


def adjacent_correlations(series: FlowSeries, network: RoadNetwork) -> list[Correlation]:
    """Pearson coefficient of every unordered link pair sharing a junction."""
    if len(series) < 2:
        raise DataError("need at least 2 samples for correlations")
    out = []
    for j in network.junctions:
        members = network.membership[j]
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                out.append(Correlation(j, a, b, pearson(series[a], series[b])))
    return out


def noise_std_for_fraction(network: RoadNetwork, days: int, seed: int, coupling: float = 0.4,
                           fraction: float = 0.08) -> float:
    """Noise level equal to ``fraction`` of the mean noise-free flow of the network."""
    if fraction < 0:
        raise DataError("fraction must be >= 0")
    clean = generate_synthetic(network, days, seed, coupling, noise_std=0.0)
    return fraction * float(clean.matrix().mean())
