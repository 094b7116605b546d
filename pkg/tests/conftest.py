import numpy as np
import pytest

from bidifac.grid import LinkedMatrixGrid
from bidifac.solver import MONOTONICITY


@pytest.fixture(autouse=True)
def no_objective_increase():
    """Every fit run by any test must have a non-increasing objective trace."""
    before = MONOTONICITY.violations
    yield
    assert MONOTONICITY.violations == before, "a fit in this test increased its objective"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rank_one_grid(rng, M, N, strength=1.0, noise=1.0):
    u = rng.standard_normal(sum(M))
    v = rng.standard_normal(sum(N))
    S = strength * np.outer(u, v)
    return LinkedMatrixGrid(S + noise * rng.standard_normal(S.shape), M, N), S


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
    from bidifac.solver import MONOTONICITY

    terminalreporter.write_line(
        f"objective monotonicity: {MONOTONICITY.violations} violations in {MONOTONICITY.fits} fits"
    )
