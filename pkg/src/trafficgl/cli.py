"""Command-line interface: ``gen``, ``run``, ``eval`` and ``graph``.

Exit codes: 0 success, 1 finished but some solver flagged non-convergence,
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import data, evaluation, glasso, models, nn

logger = logging.getLogger("trafficgl")

EXIT_OK, EXIT_WARN, EXIT_USAGE = 0, 1, 2

GEN_DEFAULTS = {
    "days": 25,
    "seed": 0,
    "coupling": 0.4,
    "noise_std": None,  # None: noise_fraction of the mean noise-free flow
    "noise_fraction": 0.08,
    "noise_ar": 0.6,
    "links_per_junction": None,  # None: the default 31-link layout
}


class UsageError(Exception):
    pass


def _available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _float_list(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("", "none", "null"):
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def read_gen_config(path: str | Path) -> dict:
    """Generator settings from a JSON object or ``key = value`` lines (``#`` comments)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = _parse_value(val)
    return out


def _gen_config(args) -> dict:
    cfg = dict(GEN_DEFAULTS)
    if args.config:
        try:
            loaded = read_gen_config(args.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}")
        loaded.pop("derived", None)  # written by gen itself, informational only
        unknown = sorted(set(loaded) - set(GEN_DEFAULTS))
        if unknown:
            raise UsageError("unknown config keys: " + ", ".join(unknown))
        cfg.update(loaded)
    for key in GEN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if not isinstance(cfg["days"], int) or cfg["days"] < 1:
        raise UsageError(f"days must be a positive integer, got {cfg['days']!r}")
    if cfg["links_per_junction"] is not None:
        lpj = cfg["links_per_junction"]
        if isinstance(lpj, str):
            try:
                lpj = [int(v) for v in lpj.split(",")]
            except ValueError:
                raise UsageError(f"bad links_per_junction {lpj!r}")
        if isinstance(lpj, int):
            lpj = [lpj]
        cfg["links_per_junction"] = [int(v) for v in lpj]
    return cfg


def cmd_gen(args) -> int:
    cfg = _gen_config(args)
    try:
        network = (data.make_network(cfg["links_per_junction"]) if cfg["links_per_junction"]
                   else data.default_network())
        noise = cfg["noise_std"]
        if noise is None:
            noise = data.noise_std_for_fraction(network, cfg["days"], cfg["seed"],
                                                cfg["coupling"], cfg["noise_fraction"])
        series = data.generate_synthetic(network, cfg["days"], cfg["seed"], cfg["coupling"],
                                         noise, cfg["noise_ar"])
    except data.DataError as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        data.write_flows(series, out / "flows.csv")
        data.write_topology(network, out / "topology.txt")
        manifest = dict(cfg)
        manifest["derived"] = {"noise_std": noise, "n_links": len(network.links),
                               "n_samples": len(series)}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}")
    logger.info("wrote %d links x %d samples to %s", len(network.links), len(series), out)
    return EXIT_OK


def _load_inputs(args) -> tuple[data.FlowSeries, data.RoadNetwork]:
    for p in (args.flows, args.topology):
        if not Path(p).is_file():
            raise UsageError(f"missing input file {p}")
    try:
        return data.load_flows(args.flows), data.read_topology(args.topology)
    except data.DataError as exc:
        raise UsageError(str(exc))


def _approaches(names: Sequence[str] | None) -> list[models.Approach]:
    if not names or any(n.lower() == "all" for n in names):
        return list(models.Approach)
    out = []
    for n in names:
        try:
            a = models.Approach.parse(n)
        except ValueError as exc:
            raise UsageError(str(exc))
        if a not in out:
            out.append(a)
    return out


def _settings(args) -> models.RunSettings:
    try:
        return models.RunSettings(
            lag=args.lag, train_samples=args.train_samples, seed=args.seed,
            jobs=args.jobs or _available_cpus(),
            nn_config=nn.TrainConfig(max_epochs=args.max_epochs),
            rho=args.rho, rho_grid=args.rho_grid or (), zero_threshold=args.zero_threshold,
            gpr_opt_rows=args.gpr_opt_rows,
        )
    except (ValueError, data.DataError) as exc:
        raise UsageError(str(exc))


def _write_graph(fit: models.GlFit, out: Path) -> None:
    (out / "gl_graph.dot").write_text(glasso.to_dot(fit.graph), encoding="utf-8")
    glasso.write_theta_csv(fit.estimate, out / "gl_theta.csv", fit.nodes)


def cmd_run(args) -> int:
    approaches = _approaches(args.approach)
    cfg = _settings(args)
    if models.Approach.GL_NN in approaches and cfg.rho is None and not cfg.rho_grid:
        raise UsageError("GL_NN needs --rho or --rho-grid")
    series, network = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    for approach in approaches:
        logger.info("running %s", approach)
        try:
            if approach is models.Approach.GL_NN and args.emit_graph and not cfg.rho_grid:
                fit = models.fit_gl_graph(series, network.links, cfg)
                _write_graph(fit, out)
                result = models.run_gl_nn(series, network, cfg, fit)
            else:
                result = models.run_approach(approach, series, network, cfg)
                if approach is models.Approach.GL_NN and args.emit_graph:
                    fit = models.fit_gl_graph(series, network.links, cfg, result.metadata["rho"])
                    _write_graph(fit, out)
        except (models.ModelError, data.DataError, glasso.GlassoError) as exc:
            raise UsageError(f"{approach}: {exc}")
        (out / f"{approach}.json").write_text(result.to_json(), encoding="utf-8")
        result.write_csv(out / "csv")
        if approach is models.Approach.GL_NN and args.emit_graph:
            lines = ["link,selected"] + [f"{k},{' '.join(v)}"
                                         for k, v in result.metadata["selected_features"].items()]
            (out / "gl_selections.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if result.variance is not None and args.band_z is not None:
            result.write_bands(out / "bands", args.band_z)
        for w in result.warnings:
            logger.warning("%s: %s", approach, w)
        if not result.converged:
            status = EXIT_WARN
    return status


def cmd_eval(args) -> int:
    results = []
    for path in args.results:
        try:
            results.append((path, models.ForecastResult.from_json(
                Path(path).read_text(encoding="utf-8"))))
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot read result file {path}: {exc}")
    first_path, first = results[0]
    for path, r in results[1:]:
        if [str(l) for l in r.links] != [str(l) for l in first.links]:
            raise UsageError(f"{path}: link set differs from {first_path}")
        if list(r.sample_index) != list(first.sample_index):
            raise UsageError(f"{path}: test range differs from {first_path}")
    if len(results) == 1:
        logger.warning("only one result given; the t-test matrix is empty")
    report = evaluation.summarize([r for _, r in results], args.baseline)
    evaluation.write_report(report, args.out)
    return EXIT_OK


def cmd_graph(args) -> int:
    out = Path(args.out)
    if args.covariance:
        if args.rho is None:
            raise UsageError("graph needs --rho")
        try:
            S = glasso.read_covariance_csv(args.covariance)
            est = glasso.glasso(S, glasso.GlassoConfig(args.rho, zero_threshold=args.zero_threshold))
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc))
        graph = glasso.extract_graph(est, args.zero_threshold)
        fit = models.GlFit(graph.nodes, est, graph, args.rho)
    else:
        if not (args.flows and args.topology):
            raise UsageError("graph needs --covariance or both --flows and --topology")
        if args.rho is None:
            raise UsageError("graph needs --rho")
        series, network = _load_inputs(args)
        try:
            cfg = models.RunSettings(lag=args.lag, train_samples=args.train_samples, rho=args.rho,
                                     zero_threshold=args.zero_threshold)
            fit = models.fit_gl_graph(series, network.links, cfg)
        except (ValueError, data.DataError) as exc:
            raise UsageError(str(exc))
    out.mkdir(parents=True, exist_ok=True)
    _write_graph(fit, out)
    return EXIT_OK if fit.estimate.converged else EXIT_WARN


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trafficgl", description="Short-term traffic-flow forecasting.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--config", help="generator settings: key=value lines or JSON (e.g. a manifest)")
    g.add_argument("--seed", type=int)
    g.add_argument("--days", type=int)
    g.add_argument("--coupling", type=float)
    g.add_argument("--noise-std", dest="noise_std", type=float,
                   help="absolute noise level in vehicles/hour")
    g.add_argument("--noise-fraction", dest="noise_fraction", type=float,
                   help="noise level relative to the mean flow (default 0.08)")
    g.add_argument("--noise-ar", dest="noise_ar", type=float)
    g.add_argument("--links-per-junction", dest="links_per_junction",
                   help="comma-separated link counts, e.g. 3,4,2")
    g.set_defaults(func=cmd_gen)

    def glasso_flags(q):
        q.add_argument("--rho", type=float, help="graphical lasso penalty")
        q.add_argument("--zero-threshold", type=float, default=5e-4,
                       help="|Theta_ij| below this is no edge (default 5e-4)")
        q.add_argument("--lag", type=int, default=5, help="history length (default 5)")
        q.add_argument("--train-samples", type=int, default=2112,
                       help="samples before the test range (default 2112)")

    r = sub.add_parser("run", help="train and forecast")
    r.add_argument("--flows", required=True)
    r.add_argument("--topology", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--approach", action="append",
                   help="approach name or 'all' (repeatable; default all)")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--jobs", type=int, default=0, help="worker processes (default: all CPUs)")
    glasso_flags(r)
    r.add_argument("--rho-grid", type=_float_list,
                   help="comma-separated penalties, chosen by GL_NN validation RMSE")
    r.add_argument("--band-z", type=float, help="write GPR predictive bands mean ± z sd")
    r.add_argument("--emit-graph", action="store_true", help="write the GL graph and selections")
    r.add_argument("--max-epochs", type=int, default=300, help="LM epoch cap per network")
    r.add_argument("--gpr-opt-rows", type=int, default=300,
                   help="latest training rows used to fit GPR hyperparameters")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="compare result files")
    e.add_argument("results", nargs="+", help="result JSON files from 'run'")
    e.add_argument("--out", required=True)
    e.add_argument("--baseline", default=evaluation.BASELINE)
    e.set_defaults(func=cmd_eval)

    gr = sub.add_parser("graph", help="graphical lasso only: DOT graph and Theta CSV")
    gr.add_argument("--covariance", help="square covariance CSV with names")
    gr.add_argument("--flows")
    gr.add_argument("--topology")
    gr.add_argument("--out", required=True)
    glasso_flags(gr)
    gr.set_defaults(func=cmd_graph)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trafficgl {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
