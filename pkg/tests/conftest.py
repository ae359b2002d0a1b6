import numpy as np
import pytest

from snpns.fields import Domain, Grid, torus_ops


@pytest.fixture
def torus64():
    return Grid(64, 64, Domain.TORUS)


@pytest.fixture
def square32():
    return Grid(32, 32, Domain.SQUARE)


def band_limited(grid, rng, kmax=8, batch=()):
    """Real random field whose spectrum is supported on 0 < |k| <= kmax."""
    ops = torus_ops(grid)
    band = (ops.kabs > 0) & (ops.kabs <= kmax)
    shape = tuple(batch) + band.shape
    coeffs = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * band
    return ops.ifft(coeffs)
