"""
Pytest configuration and fixtures for tests.
"""
import os

import numpy as np
import pytest

from app.core.config import get_settings
from app.schemas.schemas import CoherentStateSpec, DetectorModel, FockStateSpec, ThermalStateSpec
from app.services.state_service import get_state_service


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-scale statistical tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-scale statistical acceptance run (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def fresh_settings(monkeypatch):
    """Settings re-read from a clean HOMTOM_* environment for every test."""
    for name in list(os.environ):
        if name.startswith("HOMTOM_"):
            monkeypatch.delenv(name, raising=False)
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def vacuum():
    """Vacuum state |0>."""
    return FockStateSpec(n=0)


@pytest.fixture
def coherent_one():
    """Coherent state alpha = 1."""
    return CoherentStateSpec(alpha=[1.0, 0.0])


@pytest.fixture
def thermal_half():
    """Thermal state nbar = 0.5."""
    return ThermalStateSpec(nbar=0.5, truncation=40)


@pytest.fixture(scope="session")
def vacuum_samples():
    """10^5 ideal vacuum samples, seed 11."""
    return get_state_service().sample_quadratures(FockStateSpec(n=0), DetectorModel(eta=1.0), 100_000, seed=11)


@pytest.fixture(scope="session")
def coherent_samples():
    """10^5 coherent alpha = 1 samples at eta = 1, seed 5."""
    state = CoherentStateSpec(alpha=[1.0, 0.0])
    return get_state_service().sample_quadratures(state, DetectorModel(eta=1.0), 100_000, seed=5)


@pytest.fixture
def poisson_one():
    """Photon distribution of the coherent state alpha = 1."""
    n = np.arange(8)
    from scipy.special import factorial

    return np.exp(-1.0) / factorial(n)


@pytest.fixture
def sample_csv_content():
    """Sample valid homodyne CSV content."""
    return b"phi,x\n0.0,0.25\n1.5,-0.75\n3.0,1.125\n"


@pytest.fixture
def joint_csv_content():
    """Sample valid joint-record CSV content."""
    return b"n,phi,x\n0,0.1,0.2\n2,1.2,-0.4\n1,2.9,0.0\n"


@pytest.fixture
def sample_csv_with_empty_values():
    """Sample CSV content with empty values."""
    return b"phi,x\n0.1,\n,0.3\n"


@pytest.fixture
def sample_csv_with_invalid_types():
    """Sample CSV content with invalid types."""
    return b"phi,x\n0.1,not_a_number\nfive,0.3\n"


@pytest.fixture
def empty_csv_content():
    """Empty CSV with only headers."""
    return b"phi,x\n"


@pytest.fixture
def csv_without_headers():
    """CSV content without headers."""
    return b""
