import numpy as np
import pytest

from rfop.data import SyntheticSpec, generate_synthetic, split_identities


def central_diff(f, x, h=1e-5):
    """Central differences of a plain numpy function ``f(x) -> float``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SyntheticSpec(
        num_identities=30,
        prototype_dim=4,
        face_dim=8,
        voice_dim=6,
        samples_per_identity_per_language=6,
        seed=7,
    )


@pytest.fixture(scope="session")
def small_store(small_spec):
    store, _ = generate_synthetic(small_spec)
    return store


@pytest.fixture(scope="session")
def small_splits(small_store):
    return split_identities(small_store, 0.2, 0.1, seed=3)
