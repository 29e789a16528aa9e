import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(rng, n=400, k=3, p_int=-0.5, rate=0.25, horizon=60.0, window=30.0):
    """Small simulated ClickData with logistic conversion and exponential delays."""
    from convdelay.core import ClickData

    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    beta = np.zeros(k)
    beta[0] = p_int
    if k > 1:
        beta[1] = 0.5
    p = 1.0 / (1.0 + np.exp(-X @ beta))
    t0 = np.sort(rng.uniform(0, horizon, n))
    d = rng.exponential(1.0 / rate, n)
    conv = (rng.random(n) < p) & (d < window)
    return ClickData(t0, np.where(conv, t0 + d, np.nan), X), beta


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "VERDICTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
