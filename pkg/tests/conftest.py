import numpy as np
import pytest

from csiloc.geometry import ArrayConfig, Location, Scene


def random_scene(rng, n_scatterers=None, n_tx=1, n_rx=3, upper_half=False):
    """Target and scatterers in an 8 x 6 m room, AP near a corner."""
    if n_scatterers is None:
        n_scatterers = int(rng.integers(0, 3))
    ap = Location(*rng.uniform(0.1, 0.6, size=2))
    target = Location(*rng.uniform([1.5, 1.5], [7.5, 5.5]))
    scat = []
    while len(scat) < n_scatterers:
        s = rng.uniform([0, 0], [8, 6])
        if np.hypot(*(s - np.array(ap))) > 0.5 and np.hypot(*(s - np.array(target))) > 0.5:
            scat.append(Location(*s))
    coeffs = [1.0 + 0j] + list(0.3 * (rng.standard_normal(n_scatterers)
                                      + 1j * rng.standard_normal(n_scatterers)))
    return Scene(ap=ap, target=target, scatterers=tuple(scat),
                 array=ArrayConfig(n_tx=n_tx, n_rx=n_rx), coefficients=tuple(coeffs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
