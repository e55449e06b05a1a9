import numpy as np
import pytest

from romsynth.dynamics import PlanarWalkerParams


@pytest.fixture(scope="session")
def params():
    return PlanarWalkerParams()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_jacobian(f, x, eps=1e-6):
    """Central finite-difference Jacobian of f at x (columns over x)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        cols.append((np.asarray(f(x + dx), dtype=float)
                     - np.asarray(f(x - dx), dtype=float)) / (2 * eps))
    return np.stack(cols, axis=-1)


def fd_gradient(f, x, eps=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        dx = np.zeros_like(x)
        dx[i] = eps
        g[i] = (f(x + dx) - f(x - dx)) / (2 * eps)
    return g
