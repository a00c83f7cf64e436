import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kernel_trading.paths import PathBatch, uniform_path

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_path(rng, n_steps, dim, scale=0.1, horizon=1.0):
    inc = scale * rng.standard_normal((n_steps, dim))
    vals = np.vstack([np.zeros((1, dim)), np.cumsum(inc, axis=0)])
    return uniform_path(vals, horizon)


def random_batch(rng, n, n_steps, dim, scale=0.1):
    return PathBatch(tuple(random_path(rng, n_steps, dim, scale) for _ in range(n)), "rand")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"AC{n:<2d} {'PASS' if ok else 'FAIL'}  {detail}")
