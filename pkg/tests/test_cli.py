import json
import subprocess
import sys

import numpy as np
import pytest

from trafficgl import cli, data, glasso
from trafficgl.models import ForecastResult

SMALL = ["--days", "6", "--links-per-junction", "2,3", "--seed", "1"]
FAST = ["--train-samples", "480", "--max-epochs", "5", "--jobs", "1", "--gpr-opt-rows", "50"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert cli.main(["gen", "--out", str(out), *SMALL]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    argv = ["run", "--flows", str(corpus / "flows.csv"), "--topology", str(corpus / "topology.txt"),
            "--out", str(out), "--rho", "0.1", "--emit-graph", "--band-z", "1.96", *FAST]
    for a in ("HIST_AVG", "SSTL", "GPR", "GL_NN"):
        argv += ["--approach", a]
    assert cli.main(argv) == 0
    return out


def _run_argv(corpus, out, *extra):
    return ["run", "--flows", str(corpus / "flows.csv"), "--topology", str(corpus / "topology.txt"),
            "--out", str(out), *FAST, *extra]


# --- gen ---------------------------------------------------------------------------

def test_gen_outputs(corpus):
    series = data.load_flows(corpus / "flows.csv")
    network = data.read_topology(corpus / "topology.txt")
    assert len(series) == 6 * 96
    assert [str(l) for l in network.links] == ["Ba", "Bb", "Ca", "Cb", "Cc"]
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["days"] == 6 and manifest["seed"] == 1
    assert manifest["derived"]["n_links"] == 5
    assert manifest["derived"]["noise_std"] == pytest.approx(
        data.noise_std_for_fraction(network, 6, 1, 0.4, 0.08))


def test_gen_is_byte_identical(corpus, tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), *SMALL]) == 0
    for name in ("flows.csv", "topology.txt", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (corpus / name).read_bytes()


def test_gen_from_manifest(corpus, tmp_path):
    assert cli.main(["gen", "--out", str(tmp_path), "--config", str(corpus / "manifest.json")]) == 0
    assert (tmp_path / "flows.csv").read_bytes() == (corpus / "flows.csv").read_bytes()


def test_gen_key_value_config(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("# small corpus\ndays = 2\nlinks-per-junction = 2,2\nnoise_std = 10\n")
    assert cli.main(["gen", "--out", str(tmp_path / "o"), "--config", str(cfg), "--seed", "4"]) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["days"] == 2 and m["seed"] == 4 and m["derived"]["noise_std"] == 10.0


@pytest.mark.parametrize("argv", [
    ["--days", "0"],
    ["--days", "-3"],
])
def test_gen_bad_days(tmp_path, argv, capsys):
    assert cli.main(["gen", "--out", str(tmp_path), *argv]) == 2
    assert "error" in capsys.readouterr().err


def test_gen_unknown_config_key(tmp_path):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("dayz = 3\n")
    assert cli.main(["gen", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2


# --- run ---------------------------------------------------------------------------

def test_run_outputs(run_dir):
    for a in ("HIST_AVG", "SSTL", "GPR", "GL_NN"):
        r = ForecastResult.from_json((run_dir / f"{a}.json").read_text())
        assert r.approach == a
        assert r.sample_index[0] == 480 and len(r.sample_index) == 96
        assert (run_dir / "csv" / f"{a}_Ba.csv").exists()
    assert len(list((run_dir / "bands").glob("band_*.csv"))) == 5
    assert (run_dir / "gl_graph.dot").read_text().startswith("graph")
    sel = (run_dir / "gl_selections.csv").read_text().splitlines()
    assert sel[0] == "link,selected" and len(sel) == 6
    theta = (run_dir / "gl_theta.csv").read_text().splitlines()
    assert len(theta) == 1 + 30


def test_run_needs_rho_for_gl(corpus, tmp_path, capsys):
    assert cli.main(_run_argv(corpus, tmp_path, "--approach", "GL_NN")) == 2
    assert "--rho" in capsys.readouterr().err


def test_run_missing_inputs(tmp_path):
    argv = ["run", "--flows", str(tmp_path / "nope.csv"), "--topology", str(tmp_path / "t.txt"),
            "--out", str(tmp_path), "--approach", "HIST_AVG"]
    assert cli.main(argv) == 2


def test_run_unknown_approach(corpus, tmp_path):
    assert cli.main(_run_argv(corpus, tmp_path, "--approach", "LSTM")) == 2


def test_unknown_flag(corpus, tmp_path):
    assert cli.main(_run_argv(corpus, tmp_path, "--frobnicate")) == 2


def test_run_is_deterministic(corpus, run_dir, tmp_path):
    assert cli.main(_run_argv(corpus, tmp_path, "--approach", "SSTL", "--rho", "0.1")) == 0
    assert (tmp_path / "SSTL.json").read_bytes() == (run_dir / "SSTL.json").read_bytes()


# --- eval ---------------------------------------------------------------------------

def test_eval_report(run_dir, tmp_path):
    files = [str(run_dir / f"{a}.json") for a in ("HIST_AVG", "SSTL", "GPR", "GL_NN")]
    assert cli.main(["eval", *files, "--out", str(tmp_path)]) == 0
    mare = (tmp_path / "mare_table.csv").read_text().splitlines()
    assert mare[0] == "link,HIST_AVG,SSTL,GPR,GL_NN" and len(mare) == 6
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["ttests"]) == 6
    assert doc["wins_vs_baseline"]["HIST_AVG"] == 0


def test_eval_single_file(run_dir, tmp_path, caplog):
    assert cli.main(["eval", str(run_dir / "SSTL.json"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ttest_matrix.csv").read_text().splitlines() == ["approaches,SSTL", "SSTL,"]
    assert "only one result" in caplog.text


def test_eval_mixed_links(run_dir, tmp_path, capsys):
    r = ForecastResult.from_json((run_dir / "SSTL.json").read_text())
    keep = r.links[:3]
    cut = ForecastResult(r.approach, keep, r.sample_index, {l: r.actual[l] for l in keep},
                         {l: r.predicted[l] for l in keep})
    bad = tmp_path / "cut.json"
    bad.write_text(cut.to_json())
    assert cli.main(["eval", str(run_dir / "SSTL.json"), str(bad), "--out", str(tmp_path)]) == 2
    assert "link set differs" in capsys.readouterr().err


# --- graph ---------------------------------------------------------------------------

def test_graph_from_covariance(tmp_path, rng):
    A = rng.standard_normal((200, 4))
    S = A.T @ A / 200
    path = tmp_path / "cov.csv"
    lines = ["name,x1,x2,x3,x4"] + [f"x{i + 1}," + ",".join(repr(float(v)) for v in row)
                                    for i, row in enumerate(S)]
    path.write_text("\n".join(lines) + "\n")
    out = tmp_path / "g"
    assert cli.main(["graph", "--covariance", str(path), "--rho", "0.05", "--out", str(out)]) == 0
    theta = np.array([[float(v) for v in r.split(",")[1:]]
                      for r in (out / "gl_theta.csv").read_text().splitlines()[1:]])
    est = glasso.glasso(glasso.read_covariance_csv(path), glasso.GlassoConfig(0.05))
    assert np.allclose(theta, est.Theta, rtol=1e-5, atol=1e-6)
    assert "x1" in (out / "gl_graph.dot").read_text()


def test_graph_needs_rho(corpus, tmp_path):
    argv = ["graph", "--flows", str(corpus / "flows.csv"), "--topology",
            str(corpus / "topology.txt"), "--out", str(tmp_path), "--train-samples", "480"]
    assert cli.main(argv) == 2
    assert cli.main(argv + ["--rho", "0.1"]) == 0
    assert (tmp_path / "gl_theta.csv").exists()


def test_module_help():
    done = subprocess.run([sys.executable, "-m", "trafficgl", "--help"], capture_output=True,
                          text=True)
    assert done.returncode == 0
    for cmd in ("gen", "run", "eval", "graph"):
        assert cmd in done.stdout
