import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lrns.linalg import make_rng

settings.register_profile("lrns", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lrns")


def random_spd(n, seed=0, cond=10.0):
    rng = make_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.geomspace(1.0, cond, n)) @ q.T


def random_psd_with_spectrum(lam, seed=0):
    rng = make_rng(seed)
    n = len(lam)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.asarray(lam)) @ q.T, q


@pytest.fixture
def rng():
    return make_rng(12345)
