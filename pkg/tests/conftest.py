import numpy as np
import pytest

from gpmix.linalg import StructuredCovariance, ToeplitzSpec


def random_psd_toeplitz(D, rng, terms=6):
    """First row of a PSD Toeplitz matrix: a positive mixture of cosines."""
    w = rng.uniform(0.1, 2.0, size=terms)
    omega = rng.uniform(0.0, np.pi, size=terms)
    k = np.arange(D)
    return (w[:, None] * np.cos(omega[:, None] * k)).sum(axis=0)


def random_structured(rng, D=None, n=None):
    D = D or int(rng.integers(1, 17))
    n = n or int(rng.integers(1, 9))
    sigma2 = float(np.exp(rng.uniform(-3, 1)))
    return StructuredCovariance(ToeplitzSpec(random_psd_toeplitz(D, rng)), sigma2, n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for the acceptance summary; returns ``passed``."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
