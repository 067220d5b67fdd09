import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trafficgl import data

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_VERDICTS: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    line = f"criterion {n} {'PASS' if rep.passed else 'FAIL'}: {title}"
    _VERDICTS[n] = line + (f" [{detail}]" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])


def random_spd(rng: np.random.Generator, p: int, n: int | None = None) -> np.ndarray:
    """Sample covariance of ``n`` Gaussian draws (well conditioned for n >> p)."""
    n = n or 4 * p + 10
    A = rng.standard_normal((n, p))
    S = A.T @ A / n
    return (S + S.T) / 2


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_network():
    return data.make_network([2, 3, 2])


@pytest.fixture(scope="session")
def small_series(small_network):
    return data.generate_synthetic(small_network, days=6, seed=3, coupling=0.4, noise_std=40.0)


def ramp_series(links, n, scale=1.0):
    """Link i holds ``scale * (1000 * i + t)`` so every cell identifies its (link, t)."""
    return data.FlowSeries({l: scale * (1000.0 * i + np.arange(n)) for i, l in enumerate(links)})
