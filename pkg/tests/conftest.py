"""Shared fixtures for the qclock tests."""

import itertools
from pathlib import Path

import numpy as np
import pytest

from qclock.search import SearchConfig


FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def isolated_config(tmp_path, monkeypatch):
    """Point the config loader at an empty temp location."""
    path = tmp_path / "qclock-config.yaml"
    monkeypatch.setenv("QCLOCK_CONFIG", str(path))
    return path


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def quick_search():
    """Smallest search settings the validators accept."""
    def make(n: int, **overrides) -> SearchConfig:
        values = dict(
            n=n, cycles=10_000, screen_cycles=2_000, replicas=1, holdout_replicas=1,
            restarts=2, max_iterations=2, workers=1, master_seed=5,
        )
        values.update(overrides)
        return SearchConfig(**values)
    return make


# ============================================================================
# Brute-force 2^N oracle
# ============================================================================

def dicke_embedding(n: int) -> np.ndarray:
    """(2^n, n+1) matrix whose column m is the normalized Dicke state |n, m>."""
    columns = np.zeros((2 ** n, n + 1))
    for index, bits in enumerate(itertools.product((0, 1), repeat=n)):
        columns[index, sum(bits)] = 1.0
    return columns / np.sqrt(columns.sum(axis=0))


def tensor_rotation(n: int, theta: float) -> np.ndarray:
    """R_y(theta) applied to every qubit, as a 2^n x 2^n matrix."""
    c, s = np.cos(theta / 2.0), np.sin(theta / 2.0)
    single = np.array([[c, -s], [s, c]])
    full = np.array([[1.0]])
    for _ in range(n):
        full = np.kron(full, single)
    return full


def tensor_phase(n: int, phi: float) -> np.ndarray:
    """Free evolution exp(-i phi) on every |1>, as the diagonal of a 2^n operator."""
    excitations = np.array([sum(bits) for bits in itertools.product((0, 1), repeat=n)])
    return np.exp(-1j * phi * excitations)


def brute_force_probabilities(amp: np.ndarray, rows: np.ndarray, phi: float) -> np.ndarray:
    """|<a_j| U(phi) |psi>|^2 computed in the full 2^n space."""
    n = len(amp) - 1
    embed = dicke_embedding(n)
    psi = tensor_phase(n, phi) * (embed @ amp)
    return np.array([abs(np.vdot(embed @ row, psi)) ** 2 for row in rows])


@pytest.fixture
def oracle():
    class Oracle:
        embedding = staticmethod(dicke_embedding)
        rotation = staticmethod(tensor_rotation)
        phase = staticmethod(tensor_phase)
        probabilities = staticmethod(brute_force_probabilities)
    return Oracle
