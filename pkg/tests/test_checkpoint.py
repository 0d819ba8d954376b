import numpy as np
import pytest

from refvae.checkpoint import (
    CheckpointError,
    encoder_fingerprint,
    load_checkpoint,
    params_from_arrays,
    save_checkpoint,
)
from refvae.vae import VaeConfig, init_vae_params


@pytest.fixture(scope="module")
def params():
    return init_vae_params(VaeConfig(), np.random.default_rng(0))


def test_roundtrip_bit_exact(params, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params, {"kind": "baseline", "config_hash": "abc"})
    arrays, meta = load_checkpoint(path)
    assert meta["kind"] == "baseline"
    assert sorted(arrays) == sorted(params)
    for name in params:
        assert np.array_equal(arrays[name], params[name].data)


def test_save_is_byte_deterministic(params, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, params, {"kind": "baseline"})
    save_checkpoint(b, params, {"kind": "baseline"})
    assert a.read_bytes() == b.read_bytes()


def test_version_mismatch_fails_loudly(params, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    raw = bytearray(path.read_bytes())
    raw[4] = 99  # bump version field
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_fingerprint_tracks_encoder_only(params):
    arrays = {n: p.data for n, p in params.items()}
    fp = encoder_fingerprint(arrays)
    poked_dec = dict(arrays)
    poked_dec["dec.in.w"] = arrays["dec.in.w"] + 1.0
    assert encoder_fingerprint(poked_dec) == fp
    poked_enc = dict(arrays)
    poked_enc["enc.in.w"] = arrays["enc.in.w"] + 1.0
    assert encoder_fingerprint(poked_enc) != fp


def test_fingerprint_in_meta_by_default(params, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    _, meta = load_checkpoint(path)
    assert meta["encoder_fingerprint"] == encoder_fingerprint(
        {n: p.data for n, p in params.items()})


def test_params_from_arrays_trainability(params, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, params)
    arrays, _ = load_checkpoint(path)
    arrays["opt.m.dec.in.w"] = np.zeros(4, np.float32)
    restored = params_from_arrays(arrays, trainable=True)
    assert "opt.m.dec.in.w" not in restored
    assert not restored["enc.in.w"].requires_grad
    assert restored["dec.in.w"].requires_grad
