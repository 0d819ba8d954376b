import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refvae.ops import (
    attention,
    conv3d_causal,
    gelu,
    groupnorm,
    rmsnorm,
    rope_apply,
    silu,
    upsample_causal,
    upsample_nearest,
)
from refvae.tensor import Tensor, float64_mode, grad_check, parameter


def conv3d_naive(x, w, stride):
    """Direct six-nested-loop convolution with causal temporal padding."""
    cin, t_in, h_in, w_in = x.shape
    cout, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((0, 0), (kt - 1, 0), (ph, ph), (pw, pw)))
    t_out = (t_in - 1) // st + 1
    h_out = (h_in - 1) // sh + 1
    w_out = (w_in - 1) // sw + 1
    out = np.zeros((cout, t_out, h_out, w_out), dtype=np.float64)
    for co in range(cout):
        for ci in range(cin):
            for dt in range(kt):
                for dy in range(kh):
                    for dx in range(kw):
                        for t in range(t_out):
                            out[co, t] += (
                                w[co, ci, dt, dy, dx]
                                * xp[ci, t * st + dt, dy:dy + (h_out - 1) * sh + 1:sh,
                                     dx:dx + (w_out - 1) * sw + 1:sw]
                            )
    return out


# -- conv3d_causal -----------------------------------------------------------


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((1, 4, 5, 5)))
    k = Tensor(np.ones((1, 1, 1, 1, 1)))
    out = conv3d_causal(x, k)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_causal_future_invisible():
    rng = np.random.default_rng(1)
    base = rng.random((2, 6, 4, 4)).astype(np.float32)
    k = Tensor(rng.standard_normal((3, 2, 3, 3, 3)).astype(np.float32))
    out_a = conv3d_causal(Tensor(base.copy()), k).data
    poked = base.copy()
    poked[:, -1] += 1.0
    out_b = conv3d_causal(Tensor(poked), k).data
    assert np.array_equal(out_a[:, :-1], out_b[:, :-1])
    assert not np.array_equal(out_a[:, -1], out_b[:, -1])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(1, 1, 1), (2, 2, 2), (1, 2, 1)]))
def test_conv_matches_naive_oracle(seed, stride):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 5, 4, 6))
    w = rng.standard_normal((3, 2, 2, 3, 3))
    with float64_mode():
        fast = conv3d_causal(Tensor(x), Tensor(w), stride).data
    naive = conv3d_naive(x, w, stride)
    np.testing.assert_allclose(fast, naive, atol=1e-6)


def test_conv_grad_matches_finite_differences():
    with float64_mode():
        rng = np.random.default_rng(2)
        x = parameter(rng.standard_normal((2, 4, 4, 4)))
        w = parameter(rng.standard_normal((2, 2, 2, 3, 3)) * 0.3)
        assert grad_check(lambda t: conv3d_causal(t, w, (2, 2, 2)).sum(), x) < 1e-4
        assert grad_check(lambda t: conv3d_causal(x, t, (1, 1, 1)).abs().mean(), w) < 1e-3


def test_conv_rejects_bad_shapes():
    x = Tensor(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        conv3d_causal(x, Tensor(np.zeros((1, 3, 1, 1, 1))))  # channel mismatch
    with pytest.raises(ValueError):
        conv3d_causal(x, Tensor(np.zeros((1, 2, 1, 2, 2))))  # even spatial kernel


# -- upsampling --------------------------------------------------------------


def test_upsample_identity():
    x = Tensor(np.random.default_rng(3).random((2, 2, 3, 3)))
    np.testing.assert_array_equal(upsample_nearest(x, (1, 1, 1)).data, x.data)


def test_upsample_replicates_blocks():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = upsample_nearest(x, (1, 2, 2)).data
    assert out.shape == (1, 1, 4, 4)
    for i in range(2):
        for j in range(2):
            block = out[0, 0, 2 * i:2 * i + 2, 2 * j:2 * j + 2]
            assert np.all(block == x.data[0, 0, i, j])


def test_upsample_backward_is_factor_product():
    x = parameter(np.random.default_rng(4).random((2, 2, 2, 2)))
    upsample_nearest(x, (2, 3, 2)).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 12.0))
    with float64_mode():
        y = parameter(np.random.default_rng(5).standard_normal((1, 2, 2, 2)))
        assert grad_check(lambda t: upsample_nearest(t, (2, 2, 1)).abs().sum(), y) < 1e-6


def test_upsample_rejects_zero_factor():
    with pytest.raises(ValueError):
        upsample_nearest(Tensor(np.zeros((1, 1, 1, 1))), (0, 1, 1))


def test_upsample_causal_keeps_first_frame_single():
    x = Tensor(np.arange(3.0).reshape(1, 3, 1, 1))
    out = upsample_causal(x, (2, 1, 1)).data
    np.testing.assert_array_equal(out[0, :, 0, 0], np.array([0.0, 1.0, 1.0, 2.0, 2.0]))
    assert out.shape[1] == 1 + (3 - 1) * 2


# -- attention ---------------------------------------------------------------


def test_attention_single_token_returns_v():
    rng = np.random.default_rng(6)
    q, k, v = (Tensor(rng.standard_normal((1, 8))) for _ in range(3))
    np.testing.assert_allclose(attention(q, k, v, 2).data, v.data, rtol=1e-6)


def test_attention_identical_keys_average_v():
    rng = np.random.default_rng(7)
    k = Tensor(np.tile(rng.standard_normal((1, 8)), (5, 1)))
    q = Tensor(rng.standard_normal((5, 8)))
    v = Tensor(rng.standard_normal((5, 8)))
    out = attention(q, k, v, 2).data
    np.testing.assert_allclose(out, np.tile(v.data.mean(0), (5, 1)), rtol=1e-5, atol=1e-6)


def test_attention_outputs_are_convex_combinations():
    rng = np.random.default_rng(8)
    q, k, v = (Tensor(rng.standard_normal((9, 12))) for _ in range(3))
    out = attention(q, k, v, 3).data
    vh = v.data.reshape(9, 3, 4)
    lo = vh.min(axis=0).reshape(-1)
    hi = vh.max(axis=0).reshape(-1)
    for row in out.reshape(9, 3, 4).reshape(9, -1):
        assert np.all(row >= lo - 1e-5) and np.all(row <= hi + 1e-5)


def test_attention_grads_match_finite_differences():
    with float64_mode():
        rng = np.random.default_rng(9)
        k = Tensor(rng.standard_normal((4, 6)))
        v = Tensor(rng.standard_normal((4, 6)))
        q = parameter(rng.standard_normal((4, 6)))
        assert grad_check(lambda t: attention(t, k, v, 2).sum(), q) < 1e-4
        kk = parameter(k.data.copy())
        assert grad_check(lambda t: attention(q.detach(), t, v, 2).abs().sum(), kk) < 1e-4
        vv = parameter(v.data.copy())
        assert grad_check(lambda t: (attention(q.detach(), k, t, 2) * 0.5).sum(), vv) < 1e-6


def test_attention_rejects_indivisible_heads():
    t = Tensor(np.zeros((2, 7)))
    with pytest.raises(ValueError):
        attention(t, t, t, 2)


# -- rotary embedding --------------------------------------------------------


def test_rope_zero_position_is_identity():
    rng = np.random.default_rng(10)
    x = Tensor(rng.standard_normal((4, 12)))
    pos = np.zeros((4, 3), dtype=int)
    np.testing.assert_allclose(rope_apply(x, pos).data, x.data, atol=1e-7)


def test_rope_preserves_row_norms():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((6, 30)))
    pos = rng.integers(0, 20, size=(6, 3))
    out = rope_apply(x, pos).data
    np.testing.assert_allclose(
        np.linalg.norm(out, axis=1), np.linalg.norm(x.data, axis=1), atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_rope_dot_products_shift_invariant(seed):
    rng = np.random.default_rng(seed)
    with float64_mode():
        q = rng.standard_normal(30)
        k = rng.standard_normal(30)
        p1 = rng.integers(0, 12, size=3)
        p2 = rng.integers(0, 12, size=3)
        delta = rng.integers(0, 12, size=3)
        d0 = (rope_apply(Tensor(q[None]), p1[None]).data
              @ rope_apply(Tensor(k[None]), p2[None]).data.T).item()
        d1 = (rope_apply(Tensor(q[None]), (p1 + delta)[None]).data
              @ rope_apply(Tensor(k[None]), (p2 + delta)[None]).data.T).item()
    assert abs(d0 - d1) < 1e-4


def test_rope_grad_and_bad_width():
    with float64_mode():
        rng = np.random.default_rng(12)
        x = parameter(rng.standard_normal((3, 18)))
        pos = rng.integers(0, 5, size=(3, 3))
        assert grad_check(lambda t: rope_apply(t, pos).abs().sum(), x) < 1e-4
    with pytest.raises(ValueError):
        rope_apply(Tensor(np.zeros((2, 16))), np.zeros((2, 3)))  # 16 % 3 != 0
    with pytest.raises(ValueError):
        rope_apply(Tensor(np.zeros((2, 9))), np.zeros((2, 3)))  # odd per-axis width


# -- normalisation -----------------------------------------------------------


def test_rmsnorm_zero_input_zero_output():
    x = Tensor(np.zeros((3, 8)))
    out = rmsnorm(x, Tensor(np.ones(8)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 8)))


def test_rmsnorm_unit_rms():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((5, 16)) * 3.0)
    out = rmsnorm(x, Tensor(np.ones(16))).data
    rms = np.sqrt((out ** 2).mean(axis=1))
    np.testing.assert_allclose(rms, np.ones(5), atol=1e-5)


def test_rmsnorm_grad():
    with float64_mode():
        rng = np.random.default_rng(14)
        x = parameter(rng.standard_normal((3, 6)))
        g = Tensor(rng.standard_normal(6))
        assert grad_check(lambda t: rmsnorm(t, g).abs().sum(), x) < 1e-4


def test_groupnorm_grad_and_errors():
    with float64_mode():
        rng = np.random.default_rng(15)
        x = parameter(rng.standard_normal((4, 2, 3, 3)))
        gain = Tensor(np.ones((4, 1, 1, 1)))
        bias = Tensor(np.zeros((4, 1, 1, 1)))
        assert grad_check(lambda t: groupnorm(t, 2, gain, bias).abs().mean(), x) < 1e-4
    with pytest.raises(ValueError):
        groupnorm(Tensor(np.zeros((4, 1, 1, 1))), 0, gain, bias)
    with pytest.raises(ValueError):
        groupnorm(Tensor(np.zeros((4, 1, 1, 1))), 3, gain, bias)


def test_activation_grads():
    with float64_mode():
        rng = np.random.default_rng(16)
        x = parameter(rng.standard_normal(20))
        assert grad_check(lambda t: silu(t).sum(), x) < 1e-4
        assert grad_check(lambda t: gelu(t).sum(), x) < 1e-4
