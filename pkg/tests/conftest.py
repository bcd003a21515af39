import os
import pickle

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evstab.core import CameraModel

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def cam():
    return CameraModel(199.0, 199.0, 119.5, 89.5, 240, 180)


@pytest.fixture
def distorted_cam():
    return CameraModel(199.0, 198.0, 120.3, 88.7, 240, 180, k1=-0.2, k2=0.05, p1=1e-3, p2=-5e-4, k3=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_cache(request):
    """Simulated sequences keyed by their config, cached across test sessions."""
    from evstab import __version__
    from evstab.sim import config_digest, simulate

    root = request.config.cache.mkdir("evstab-sims")

    def get(cfg, with_frames=True):
        key = f"{__version__}-{config_digest(cfg)[:16]}-{int(with_frames)}.pkl"
        path = root / key
        if path.exists():
            with open(path, "rb") as f:
                return pickle.load(f)
        seq = simulate(cfg, with_frames=with_frames)
        with open(path, "wb") as f:
            pickle.dump(seq, f)
        return seq

    return get


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
