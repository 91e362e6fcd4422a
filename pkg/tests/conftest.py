import numpy as np
import pytest

from ivmix.mixture import GaussianMixture


def random_mixture(rng: np.random.Generator, k=None, d: int = 1) -> GaussianMixture:
    """Random valid mixture with well-conditioned information matrices."""
    k = int(rng.integers(1, 5)) if k is None else k
    w = rng.dirichlet(np.ones(k))
    mu = rng.normal(0.0, 5.0, (k, d))
    info = []
    for _ in range(k):
        a = rng.normal(size=(d, d))
        info.append(a @ a.T + rng.uniform(0.05, 2.0) * np.eye(d))
    return GaussianMixture.from_info(w, mu, np.stack(info))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ---------------------------------------------------------

_CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_CRITERIA] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    log = request.config.stash[_CRITERIA]

    def record(n: int, ok: bool, detail: str) -> bool:
        log.append((n, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(_CRITERIA, []))
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in lines:
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
