import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cdcm.simulate import benchmark_design, chain_models, simple_model_truth

settings.register_profile("cdcm", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cdcm")


@pytest.fixture(scope="session")
def simple():
    return simple_model_truth()


@pytest.fixture(scope="session")
def complex_model():
    return chain_models(3)


@pytest.fixture(scope="session")
def design():
    return benchmark_design()


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_stable(rng, d, spread=0.3):
    """Random matrix with distinct negative real eigenvalues."""
    lam = -np.sort(rng.uniform(0.2, 1.2, d))
    lam += spread * np.arange(d) / max(d, 1) * 0.1
    V = rng.normal(size=(d, d)) + 2 * np.eye(d)
    return V @ np.diag(lam) @ np.linalg.inv(V)


class GaussianTarget:
    """Multivariate normal log density with exact gradient."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.prec = np.linalg.inv(self.cov)
        self.dim = self.mean.size

    def logp_and_grad(self, x):
        r = x - self.mean
        g = -self.prec @ r
        return 0.5 * float(r @ g), g


_ACCEPTANCE = []


def record_acceptance(line):
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
