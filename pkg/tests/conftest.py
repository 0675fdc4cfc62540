import numpy as np
import pytest

from pmpnet.net import NetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    """A small architecture that still exercises every code path."""
    base = dict(
        n_points=16,
        sa_centers=(8, 4),
        sa_radii=(0.5, 0.8),
        sa_samples=(4, 4),
        sa_mlps=((4, 4, 6), (6, 6, 8), (8, 8, 8)),
        fp_mlps=((8, 8), (8, 6), (6, 6, 6)),
        head_mlp=(6, 4),
        noise_dim=2,
    )
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()
