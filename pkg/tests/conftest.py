import numpy as np
import pytest

from vlae import laplace

SIGMA_BOUND = 1.0 + 1e-9
_seen = {"calls": 0, "max_eig": 0.0}


@pytest.fixture(autouse=True)
def covariance_bound(monkeypatch):
    """Every Laplace covariance built in any test satisfies Sigma <= I."""
    original = laplace.posterior_from_precision

    def watched(mu, precision, jitter=1e-8):
        q = original(mu, precision, jitter)
        top = float(np.linalg.eigvalsh(q.sigma).max(initial=0.0))
        _seen["calls"] += 1
        _seen["max_eig"] = max(_seen["max_eig"], top)
        assert top <= SIGMA_BOUND, f"posterior covariance eigenvalue {top} exceeds 1"
        return q

    monkeypatch.setattr(laplace, "posterior_from_precision", watched)
    yield


@pytest.fixture
def covariance_stats():
    return _seen


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
