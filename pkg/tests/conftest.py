import numpy as np
import pytest

from refvae.refcond import RefCondConfig, init_ref_params
from refvae.vae import VaeConfig, init_vae_params


@pytest.fixture(scope="session")
def desk_cfg():
    return VaeConfig()


@pytest.fixture(scope="session")
def desk_params(desk_cfg):
    return init_vae_params(desk_cfg, np.random.default_rng(11))


@pytest.fixture()
def tiny_cfg():
    """Smallest legal backbone: 2x spatial, no temporal compression, 1x1x1 convs."""
    return VaeConfig(spatial_compression=2, temporal_compression=1, latent_channels=2,
                     stage_channels=(4, 2, 2), res_blocks=1, stage_kernels=(1, 1, 1),
                     norm_groups=2)


@pytest.fixture()
def tiny_ref_cfg():
    return RefCondConfig(n_blocks=1, hidden=12, heads=2, ff_mult=2, token_strides=(1, 1, 1))


@pytest.fixture()
def tiny_params(tiny_cfg, tiny_ref_cfg):
    rng = np.random.default_rng(3)
    params = init_vae_params(tiny_cfg, rng)
    params.update(init_ref_params(tiny_cfg, tiny_ref_cfg, rng, null_hw=(2, 2)))
    return params
