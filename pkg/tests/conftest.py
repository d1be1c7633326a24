import numpy as np
import pytest

from scorelab import GmmSpec, MlpArch, new_net


@pytest.fixture
def small_spec():
    """3-component mixture in the plane, tight clusters."""
    return GmmSpec(
        weights=np.array([0.5, 0.3, 0.2]),
        means=np.array([[0.5, -0.3], [-0.4, 0.6], [0.1, 0.2]]),
        sigma2=0.05**2,
    )


@pytest.fixture
def symmetric_spec():
    """Mixture symmetric about the origin (odd scores)."""
    return GmmSpec(
        weights=np.array([0.5, 0.5]),
        means=np.array([[0.7, -0.2], [-0.7, 0.2]]),
        sigma2=0.1**2,
    )


def random_net(d, seed, time_scale=2.0, scale=0.3):
    """A net with fully generic parameters (no zero-initialized layers)."""
    net = new_net(MlpArch(input_dim=d, time_scale=time_scale), seed=seed)
    rng = np.random.default_rng(seed + 1)
    net.params.data[:] = scale * rng.standard_normal(len(net.params))
    return net
