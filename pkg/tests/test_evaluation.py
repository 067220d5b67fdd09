import json
import math
from fractions import Fraction
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from trafficgl import evaluation as ev

# Two-sided Student-t tail probabilities from direct numerical integration of the
# t density at 40 significant digits (mpmath.quad), frozen here.
T_TABLE = [
    (1.0, 30, 0.32530861542602989),
    (2.042, 30, 0.050028670656197901),
    (0.5, 4, 0.64332996318186327),
    (3.0, 10, 0.013343655022569577),
    (2.0, 1, 0.29516723530086655),
    (10.0, 30, 4.5752514082296132e-11),
]

finite = st.floats(-1e4, 1e4, allow_nan=False)


# --- metrics ------------------------------------------------------------------

def test_rmse_examples():
    assert ev.rmse([100, 200], [110, 190]) == 10.0
    assert ev.rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert ev.rmse([5.0], [12.0]) == 7.0
    with pytest.raises(ValueError):
        ev.rmse([1, 2], [1])
    with pytest.raises(ValueError):
        ev.rmse([], [])
    with pytest.raises(ValueError, match="non-finite"):
        ev.mare([100, 200], [110, np.nan])


def test_mare_examples():
    assert ev.mare([100, 200], [110, 190]) == 0.075
    assert ev.mare([4, 5], [4, 5]) == 0.0
    value, excluded = ev.mare([0, 100, 200], [3, 110, 190], return_excluded=True)
    assert value == 0.075 and excluded == 1
    with pytest.raises(ValueError):
        ev.mare([0, 0], [1, 1])


def test_mare_correctly_rounded(rng):
    a, p = rng.uniform(50, 900, 40), rng.uniform(50, 900, 40)
    exact = sum(Fraction(abs(Fraction(x) - Fraction(y))) / Fraction(x) for x, y in zip(a, p)) / 40
    assert ev.mare(a, p) == float(exact)
    assert ev.mare(a, p) == pytest.approx(np.mean(np.abs(a - p) / a), rel=1e-14)


def test_mare_not_symmetric():
    assert ev.mare([100, 200], [110, 190]) != ev.mare([110, 190], [100, 200])


@given(st.lists(st.tuples(finite, finite), min_size=1, max_size=30), st.floats(-50, 50))
def test_rmse_symmetry_and_scaling(pairs, c):
    a, b = np.array(pairs).T
    assert ev.rmse(a, b) == ev.rmse(b, a)
    assert ev.rmse(c * a, c * b) == pytest.approx(abs(c) * ev.rmse(a, b), rel=1e-9, abs=1e-9)


@given(st.lists(st.tuples(st.floats(1, 1e4), st.floats(0, 1e4)), min_size=1, max_size=30),
       st.floats(1e-3, 1e3))
def test_mare_scale_invariance(pairs, c):
    a, b = np.array(pairs).T
    assert ev.mare(c * a, c * b) == pytest.approx(ev.mare(a, b), rel=1e-9, abs=1e-12)


# --- t-test -------------------------------------------------------------------

@pytest.mark.parametrize("t,df,p", T_TABLE)
def test_t_pvalue_table(t, df, p):
    assert ev.t_two_sided_p(t, df) == pytest.approx(p, rel=1e-9)
    assert ev.t_two_sided_p(-t, df) == pytest.approx(p, rel=1e-9)


def test_t_pvalue_critical_value():
    assert abs(ev.t_two_sided_p(2.042, 30) - 0.05) < 1e-3
    assert abs(ev.t_two_sided_p(1.0, 30) - 0.3253) < 1e-3


def test_paired_ttest_fixtures():
    a = ev.paired_ttest([1, 2, 3], [1, 2, 3])
    assert a.p == 1.0 and a.degenerate == "identical"
    b = ev.paired_ttest([1, -1, 1, -1], [0, 0, 0, 0])
    assert b.t == 0.0 and b.p == pytest.approx(1.0, abs=1e-15) and b.df == 3
    c = ev.paired_ttest([1, 1, 1, 1, 1], [0, 0, 0, 0, 0])
    assert c.p == 0.0 and c.degenerate == "zero_variance" and c.t == math.inf
    with pytest.raises(ValueError):
        ev.paired_ttest([1], [2])


def test_paired_ttest_against_scipy(rng):
    stats = pytest.importorskip("scipy.stats")
    a, b = rng.normal(10, 2, 31), rng.normal(10.5, 2, 31)
    ours = ev.paired_ttest(a, b)
    ref = stats.ttest_rel(a, b)
    assert ours.t == pytest.approx(ref.statistic, rel=1e-12)
    assert ours.p == pytest.approx(ref.pvalue, rel=1e-9)
    assert ours.df == 30


@given(st.lists(st.tuples(finite, finite), min_size=2, max_size=20))
def test_paired_ttest_antisymmetry(pairs):
    a, b = np.array(pairs).T
    x, y = ev.paired_ttest(a, b), ev.paired_ttest(b, a)
    assert x.p == y.p
    assert x.t == -y.t
    assert 0.0 <= x.p <= 1.0


# --- report -------------------------------------------------------------------

def _result(name, links, actual, pred, index=None):
    index = np.arange(len(actual[0])) if index is None else index
    return SimpleNamespace(approach=name, links=links, sample_index=index,
                           actual=dict(zip(links, map(np.asarray, actual))),
                           predicted=dict(zip(links, map(np.asarray, pred))))


def test_single_row_report():
    rep = ev.summarize([_result("SSTL", ["Ba"], [[100, 200]], [[110, 190]])])
    assert len(rep.rows) == 1
    assert rep.rows[0].rmse == 10.0 and rep.rows[0].mare == 0.075
    assert rep.ttests == []


def _seven(rng, n_links=31):
    links = [f"L{i}" for i in range(n_links)]
    actual = [rng.uniform(100, 900, 12) for _ in links]
    names = ["SSTL", "SMTL", "MSTL", "MMTL", "GPR", "GL_NN", "HIST_AVG"]
    out = []
    for k, name in enumerate(names):
        noise = 5 + 3 * k
        out.append(_result(name, links, actual, [a + rng.normal(0, noise, a.size) for a in actual]))
    return out


def test_full_report_shape(rng, tmp_path):
    rep = ev.summarize(_seven(rng))
    assert rep.table("mare").shape == (31, 7)
    assert len(rep.ttests) == 21
    assert rep.wins_vs_baseline["HIST_AVG"] == 0
    assert all(t.df == 30 for t in rep.ttests)
    for a in rep.approaches:
        assert rep.rmse_sums[a] == pytest.approx(rep.table("rmse")[:, rep.approaches.index(a)].sum())

    ev.write_report(rep, tmp_path)
    mare = (tmp_path / "mare_table.csv").read_text().splitlines()
    assert mare[0] == "link,SSTL,SMTL,MSTL,MMTL,GPR,GL_NN,HIST_AVG"
    assert len(mare) == 32
    tt = [l.split(",") for l in (tmp_path / "ttest_matrix.csv").read_text().splitlines()]
    filled = sum(1 for row in tt[1:] for c in row[1:] if c)
    assert filled == 21
    assert all(c == "" for i, row in enumerate(tt[1:]) for c in row[1:i + 2])
    doc = json.loads((tmp_path / "report.json").read_text())
    assert doc["metadata"]["ttest_basis"].startswith("per-link RMSE")
    assert len(doc["metrics"]) == 31 * 7


def test_six_significant_digits(tmp_path):
    rep = ev.summarize([_result("A", ["Ba"], [[100.0, 200.0, 300.0]], [[101.234567891, 200, 300]])])
    ev.write_report(rep, tmp_path)
    row = (tmp_path / "rmse_table.csv").read_text().splitlines()[1]
    assert row == "Ba,0.712778"


def test_win_counts_strict(rng):
    links = ["a", "b", "c"]
    actual = [np.full(4, 100.0)] * 3
    base = _result("HIST_AVG", links, actual, [a + 10 for a in actual])
    tie = _result("X", links, actual, [a + 10 for a in actual])
    better = _result("Y", links, actual, [a + 1 for a in actual])
    rep = ev.summarize([base, tie, better])
    assert rep.wins_vs_baseline == {"HIST_AVG": 0, "X": 0, "Y": 3}


def test_inconsistent_results_rejected():
    a = _result("A", ["a", "b"], [[1, 2], [3, 4]], [[1, 2], [3, 4]])
    b = _result("B", ["a"], [[1, 2]], [[1, 2]])
    with pytest.raises(ValueError, match="link set"):
        ev.summarize([a, b])
    c = _result("C", ["a", "b"], [[1, 2], [3, 4]], [[1, 2], [3, 4]], index=np.array([5, 6]))
    with pytest.raises(ValueError, match="test range"):
        ev.summarize([a, c])
