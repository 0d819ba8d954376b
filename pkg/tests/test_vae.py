import numpy as np
import pytest

from refvae.synthdata import gen_clip
from refvae.tensor import Tensor
from refvae.vae import (
    VaeConfig,
    decode_baseline_t,
    encode,
    encode_t,
    encoder_names,
    init_vae_params,
)


def earliest_frame(j: int, q: int) -> int:
    """First output frame that latent temporal index j can influence."""
    return 0 if j == 0 else 1 + (j - 1) * q


def test_config_validates():
    VaeConfig().validate()
    with pytest.raises(ValueError):
        VaeConfig(spatial_compression=6).validate()
    with pytest.raises(ValueError):
        VaeConfig(stage_channels=(64, 32, 30)).validate()
    with pytest.raises(ValueError):
        VaeConfig(stage_kernels=(3, 2, 3)).validate()


def test_stage_factors_invert_compression(desk_cfg):
    factors = desk_cfg.stage_factors()
    spatial = int(np.prod([f[1] for f in factors]))
    temporal = int(np.prod([f[0] for f in factors]))
    assert desk_cfg.spatial_compression == 2 * spatial
    assert desk_cfg.temporal_compression == temporal


def test_latent_shape_arithmetic(desk_cfg):
    assert desk_cfg.latent_shape(5, 32, 64) == (8, 2, 4, 8)
    assert desk_cfg.latent_shape(17, 32, 64) == (8, 5, 4, 8)
    with pytest.raises(ValueError):
        desk_cfg.latent_shape(6, 32, 64)
    with pytest.raises(ValueError):
        desk_cfg.latent_shape(5, 30, 64)


def test_encode_shape_and_determinism(desk_cfg, desk_params):
    clip = gen_clip(1, "content_rich", 5, 32, 64)
    z1 = encode(clip.frames, desk_cfg, desk_params)
    z2 = encode(clip.frames, desk_cfg, desk_params)
    assert z1.data.shape == (8, 2, 4, 8)
    assert np.array_equal(z1.data, z2.data)


def test_encode_is_temporally_causal(desk_cfg, desk_params):
    clip = gen_clip(2, "content_rich", 5, 32, 64)
    z_a = encode(clip.frames, desk_cfg, desk_params).data
    poked = clip.frames.copy()
    poked[4] = np.clip(poked[4] + 0.3, 0, 1)
    z_b = encode(poked, desk_cfg, desk_params).data
    assert np.array_equal(z_a[:, 0], z_b[:, 0])
    assert not np.array_equal(z_a[:, 1], z_b[:, 1])


def test_roundtrip_shape_inversion(desk_cfg, desk_params):
    for frames in (5, 17):
        clip = gen_clip(3, "content_sparse", frames, 32, 64)
        z = encode_t(Tensor(clip.frames), desk_cfg, desk_params)
        out = decode_baseline_t(z, desk_cfg, desk_params)
        assert out.shape == clip.frames.shape


def test_zero_latent_decodes_in_range(desk_cfg, desk_params):
    z = Tensor(np.zeros((8, 2, 4, 8), dtype=np.float32))
    out = decode_baseline_t(z, desk_cfg, desk_params).data
    assert np.all(np.isfinite(out))
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("j", [0, 1, 2, 3, 4])
def test_decoder_temporal_causality(desk_cfg, desk_params, j):
    rng = np.random.default_rng(40 + j)
    z = rng.standard_normal((8, 5, 4, 8)).astype(np.float32)
    base = decode_baseline_t(Tensor(z), desk_cfg, desk_params).data
    poked = z.copy()
    poked[:, j] += 0.5
    out = decode_baseline_t(Tensor(poked), desk_cfg, desk_params).data
    first = earliest_frame(j, desk_cfg.temporal_compression)
    assert np.array_equal(base[:first], out[:first])
    assert not np.array_equal(base[first:], out[first:])


def test_init_is_seed_deterministic(desk_cfg):
    a = init_vae_params(desk_cfg, np.random.default_rng(5))
    b = init_vae_params(desk_cfg, np.random.default_rng(5))
    assert sorted(a) == sorted(b)
    for name in a:
        assert np.array_equal(a[name].data, b[name].data)


def test_encoder_names_cover_only_encoder(desk_params):
    names = encoder_names(desk_params)
    assert names and all(n.startswith("enc.") for n in names)
    assert not any(n.startswith("dec.") for n in names)
