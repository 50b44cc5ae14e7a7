"""Shared scenarios for the iscapbeam test suite."""

import numpy as np
import pytest

from iscapbeam.metrics import BeamformingSolution
from iscapbeam.scenario import ScenarioConfig, UserGeometry, build_scenario, generate_channels

DESK = dict(n_tx=4, n_rx=8, n_symbols=8, n_subcarriers=4, n_slots=4, n_grid=24)
DESK_CENTERS = np.radians([-45.0, -15.0, 15.0, 45.0])
TINY = dict(n_tx=3, n_rx=4, n_symbols=2, n_subcarriers=2, n_slots=2, n_grid=12)
TINY_CENTERS = np.radians([-45.0, 45.0])


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: solver-heavy property tests')


@pytest.fixture
def desk_config():
    return ScenarioConfig(**DESK)


@pytest.fixture
def desk_geometry():
    return UserGeometry(np.radians([-50.0, -15.0]), (110.0, 90.0), np.radians([-40.0]), (25.0,))


@pytest.fixture
def desk_scenario(desk_config, desk_geometry):
    return build_scenario(desk_config, desk_geometry, DESK_CENTERS, np.radians(30.0))


@pytest.fixture
def desk_channels(desk_config, desk_geometry):
    return generate_channels(desk_config, desk_geometry)


@pytest.fixture
def tiny_config():
    return ScenarioConfig(**TINY)


@pytest.fixture
def tiny_geometry():
    return UserGeometry(np.radians([-50.0]), (110.0,), np.radians([-40.0]), (25.0,))


@pytest.fixture
def tiny_scenario(tiny_config, tiny_geometry):
    return build_scenario(tiny_config, tiny_geometry, TINY_CENTERS, np.radians(60.0))


@pytest.fixture
def tiny_channels(tiny_config, tiny_geometry):
    return generate_channels(tiny_config, tiny_geometry)


def random_psd(rng, dim, rank=None):
    rank = rank or dim
    factor = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    return factor @ factor.conj().T


def random_solution(rng, n_sc, n_sym, n_ir, n_tx, tx_power=1.0):
    """Random PSD covariances whose per-symbol total trace is tx_power."""
    covariances = np.array([[[random_psd(rng, n_tx) for _ in range(n_ir + 1)]
                             for _ in range(n_sym)] for _ in range(n_sc)])
    traces = np.real(np.trace(covariances, axis1=-2, axis2=-1)).sum(axis=(0, 2))
    covariances = covariances * (tx_power / traces)[None, :, None, None, None]
    return BeamformingSolution(covariances)
