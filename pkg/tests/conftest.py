import pytest

from mlmc_greeks import estimators
from mlmc_greeks.sde import MarketParams

BACKENDS = ["python"] + (["cython"] if estimators._compiled is not None else [])


@pytest.fixture
def base_market():
    return MarketParams(S0=100.0, K=100.0, r=0.05, sigma=0.2, T=1.0)


@pytest.fixture(params=BACKENDS)
def each_backend(request):
    previous = estimators.set_backend(request.param)
    yield request.param
    estimators.set_backend(previous)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
