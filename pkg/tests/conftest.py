import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hmmkit.params import EmissionSpec, NaturalParams

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# two-state Poisson benchmark used throughout the accuracy checks
TRUTH_POISSON = NaturalParams(gamma=[[0.95, 0.05], [0.15, 0.85]], lam=[1.0, 7.0])
# well separated two-state Gaussian
TRUTH_GAUSS = NaturalParams(gamma=[[0.9, 0.1], [0.1, 0.9]], mu=[-5.0, 5.0], sigma=[1.0, 5.0])


def random_params(rng, m, family, floor=0.02):
    """Random valid NaturalParams with a strictly positive TPM."""
    g = rng.dirichlet(np.ones(m), size=m) + floor
    g /= g.sum(axis=1, keepdims=True)
    if family == "poisson":
        return NaturalParams(gamma=g, lam=np.sort(rng.uniform(0.5, 8.0, m)))
    return NaturalParams(gamma=g, mu=np.sort(rng.normal(0, 3, m)), sigma=rng.uniform(0.5, 3.0, m))


def random_obs(rng, n, T):
    if n.family.value == "poisson":
        return rng.poisson(3.0, T).astype(float)
    return rng.normal(0.0, 3.0, T)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def poisson_series():
    from hmmkit.studies import simulate
    obs, path = simulate(TRUTH_POISSON, 200, 7)
    return obs, path


@pytest.fixture(scope="session")
def poisson_fit(poisson_series):
    from hmmkit.optim import fit
    obs, _ = poisson_series
    return fit(EmissionSpec("poisson", 2), obs, TRUTH_POISSON)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
