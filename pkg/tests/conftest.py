import numpy as np
import pytest

from ape.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def spec():
    return PhantomSpec()


@pytest.fixture(scope="session")
def phantom(spec):
    return generate_phantom(spec, 7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def acceptance(request):
    """Registry of acceptance outcomes, printed once at the end of the run."""
    if not hasattr(request.config, "_ape_acceptance"):
        request.config._ape_acceptance = {}
    return request.config._ape_acceptance


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_ape_acceptance", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
