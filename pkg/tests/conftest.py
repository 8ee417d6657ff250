import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_simplex_points(rng, d, n, margin=0.0):
    """Uniform points in the master simplex, shrunk towards its centroid by ``margin``."""
    x = rng.dirichlet(np.ones(d + 1), size=n)[:, 1:]
    c = np.full(d, 1.0 / (d + 1))
    return c + (1.0 - margin) * (x - c)


@pytest.fixture(scope="session")
def fixture_dir(tmp_path_factory):
    from hoadapt.fixtures import generate_fixtures

    out = tmp_path_factory.mktemp("fixtures")
    generate_fixtures(out)
    return out


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
