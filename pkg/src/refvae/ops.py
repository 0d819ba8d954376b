"""Model-level differentiable primitives built on the tensor engine.

Convolution, attention and rotary embedding carry hand-written backward
rules (fused ops); the normalisations and the causal temporal upsampling
are compositions of engine primitives and inherit their gradients.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _acc, _from_op, _grad_buffer, concat

EPS = 1e-6


def conv3d_causal(x: Tensor, kernel: Tensor, stride: tuple[int, int, int] = (1, 1, 1)) -> Tensor:
    """Causal 3D convolution over [C, T, H, W].

    Temporal padding of kt-1 zeros is applied entirely at the front, so
    output index t depends only on input indices <= t*st.  Spatial padding
    is symmetric (kh-1)/2, which requires odd spatial kernels.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 5:
        raise ValueError("conv3d_causal expects x[C,T,H,W] and kernel[Cout,Cin,kt,kh,kw]")
    cin, t_in, h_in, w_in = x.shape
    cout, cin_k, kt, kh, kw = kernel.shape
    st, sh, sw = stride
    if cin_k != cin:
        raise ValueError(f"kernel expects {cin_k} input channels, got {cin}")
    if min(kt, kh, kw) < 1 or min(t_in, h_in, w_in) < 1 or min(st, sh, sw) < 1:
        raise ValueError("kernel, input and stride dims must be >= 1")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("spatial kernel dims must be odd for symmetric padding")

    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    t_out = (t_in - 1) // st + 1
    h_out = (h_in - 1) // sh + 1
    w_out = (w_in - 1) // sw + 1
    n = t_out * h_out * w_out

    # channels-last internally: per-offset patch copies become contiguous
    # channel blocks, which is an order of magnitude faster than slicing
    # a channels-first volume
    xcl = np.ascontiguousarray(x.data.transpose(1, 2, 3, 0))
    xp = np.pad(xcl, ((kt - 1, 0), (ph, ph), (pw, pw), (0, 0)))
    wcl = np.ascontiguousarray(kernel.data.transpose(2, 3, 4, 1, 0))  # [kt,kh,kw,Cin,Cout]
    acc = np.zeros((n, cout), dtype=x.dtype)
    slices = []
    for dt in range(kt):
        ts = slice(dt, dt + (t_out - 1) * st + 1, st)
        for dy in range(kh):
            ys = slice(dy, dy + (h_out - 1) * sh + 1, sh)
            for dx in range(kw):
                xs = slice(dx, dx + (w_out - 1) * sw + 1, sw)
                slices.append((dt, dy, dx, ts, ys, xs))
                patch = xp[ts, ys, xs, :].reshape(n, cin)
                acc += patch @ wcl[dt, dy, dx]
    out = np.ascontiguousarray(acc.reshape(t_out, h_out, w_out, cout).transpose(3, 0, 1, 2))

    def bw(g):
        gcl = np.ascontiguousarray(g.transpose(1, 2, 3, 0)).reshape(n, cout)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gk = _grad_buffer(kernel) if kernel.requires_grad else None
        for dt, dy, dx, ts, ys, xs in slices:
            if kernel.requires_grad:
                patch = xp[ts, ys, xs, :].reshape(n, cin)
                gk[:, :, dt, dy, dx] += gcl.T @ patch
            if x.requires_grad:
                gxp[ts, ys, xs, :] += (gcl @ wcl[dt, dy, dx].T).reshape(t_out, h_out, w_out, cin)
        if x.requires_grad:
            gx = gxp[kt - 1:, ph:ph + h_in, pw:pw + w_in, :]
            _acc(x, gx.transpose(3, 0, 1, 2))

    return _from_op(out, (x, kernel), bw)


def upsample_nearest(x: Tensor, factors: tuple[int, int, int]) -> Tensor:
    """Nearest-neighbour replication of [C, T, H, W] by integer factors."""
    ft, fh, fw = factors
    if min(ft, fh, fw) < 1:
        raise ValueError("upsample factors must be >= 1")
    c, t_in, h_in, w_in = x.shape
    y = x.data
    for ax, f in ((1, ft), (2, fh), (3, fw)):
        if f > 1:
            y = np.repeat(y, f, axis=ax)

    def bw(g):
        if x.requires_grad:
            gg = g.reshape(c, t_in, ft, h_in, fh, w_in, fw)
            _acc(x, gg.sum(axis=(2, 4, 6)))

    return _from_op(y, (x,), bw)


def upsample_causal(x: Tensor, factors: tuple[int, int, int]) -> Tensor:
    """Temporal upsampling that never duplicates the first frame.

    Maps T -> 1 + (T-1)*ft so a first-frame-uncompressed encoding is
    inverted exactly; spatial factors replicate as usual.
    """
    ft, fh, fw = factors
    if ft == 1 or x.shape[1] == 1:
        return upsample_nearest(x, (1, fh, fw))
    head = upsample_nearest(x[:, :1], (1, fh, fw))
    tail = upsample_nearest(x[:, 1:], (ft, fh, fw))
    return concat([head, tail], axis=1)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention over a flat [L, d] sequence.

    Full bidirectional attention: no mask over the token sequence.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError("q, k, v must share shape [L, d]")
    seq, d = q.shape
    if d % heads:
        raise ValueError(f"hidden dim {d} not divisible by {heads} heads")
    dh = d // heads
    scale = 1.0 / float(np.sqrt(dh))  # python float: no f32 -> f64 promotion

    def split(t):
        return t.reshape(seq, heads, dh).transpose(1, 0, 2)  # [H, L, dh]

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    s = np.matmul(qh, kh.transpose(0, 2, 1)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = np.matmul(p, vh)
    out = o.transpose(1, 0, 2).reshape(seq, d)

    def bw(g):
        gh = g.reshape(seq, heads, dh).transpose(1, 0, 2)
        if v.requires_grad:
            gv = np.matmul(p.transpose(0, 2, 1), gh)
            _acc(v, gv.transpose(1, 0, 2).reshape(seq, d))
        if q.requires_grad or k.requires_grad:
            gp = np.matmul(gh, vh.transpose(0, 2, 1))
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
            if q.requires_grad:
                _acc(q, (np.matmul(gs, kh) * scale).transpose(1, 0, 2).reshape(seq, d))
            if k.requires_grad:
                _acc(k, (np.matmul(gs.transpose(0, 2, 1), qh) * scale).transpose(1, 0, 2).reshape(seq, d))

    return _from_op(out, (q, k, v), bw)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotary position embedding over 3D integer coordinates (t, h, w).

    The channel budget splits equally across the three axes; within an axis
    block, consecutive channel pairs rotate with geometric frequency
    spacing.  Norm-preserving; identity at position (0, 0, 0).
    """
    seq, d = x.shape
    if d % 3 or (d // 3) % 2:
        raise ValueError("rope needs d divisible by 3 axes with even per-axis width")
    pos = np.asarray(positions, dtype=np.float64)
    if pos.shape != (seq, 3):
        raise ValueError(f"positions must be [L, 3], got {pos.shape}")
    pairs = d // 6
    inv_freq = base ** (-np.arange(pairs, dtype=np.float64) / pairs)
    ang = pos[:, :, None] * inv_freq[None, None, :]  # [L, 3, pairs]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)

    xv = x.data.reshape(seq, 3, pairs, 2)
    x1, x2 = xv[..., 0], xv[..., 1]
    y = np.empty_like(xv)
    y[..., 0] = x1 * cos - x2 * sin
    y[..., 1] = x1 * sin + x2 * cos

    def bw(g):
        if x.requires_grad:
            gv = g.reshape(seq, 3, pairs, 2)
            g1, g2 = gv[..., 0], gv[..., 1]
            gx = np.empty_like(gv)
            gx[..., 0] = g1 * cos + g2 * sin
            gx[..., 1] = -g1 * sin + g2 * cos
            _acc(x, gx.reshape(seq, d))

    return _from_op(y.reshape(seq, d), (x,), bw)


def rmsnorm(x: Tensor, gain: Tensor, axis: int = -1) -> Tensor:
    """x / sqrt(mean(x^2, axis) + eps) * gain."""
    ms = (x * x).mean(axis=axis, keepdims=True)
    return x / (ms + EPS).sqrt() * gain


def groupnorm(x: Tensor, groups: int, gain: Tensor, bias: Tensor) -> Tensor:
    """Group normalisation over [C, T, H, W] with per-channel affine.

    Statistics are taken per frame (over in-group channels and space, never
    over time), so normalisation cannot leak future frames into past ones.
    """
    c, t, h, w = x.shape
    if groups < 1:
        raise ValueError("groups must be >= 1")
    if c % groups:
        raise ValueError(f"{c} channels not divisible into {groups} groups")
    xg = x.reshape(groups, c // groups, t, h, w)
    mu = xg.mean(axis=(1, 3, 4), keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=(1, 3, 4), keepdims=True)
    y = xc / (var + EPS).sqrt()
    return y.reshape(x.shape) * gain + bias


def patch_embed(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Non-overlapping patch projection: conv with stride == kernel, no padding.

    x[C, T, H, W] with w[D, C, 1, s, s] -> [D, T, H/s, W/s].  Realised as a
    reshape + matmul, so the gradient comes from the engine primitives.
    """
    d_out, cin_k, kt, sh, sw = w.shape
    cin, t, h, w_in = x.shape
    if kt != 1 or sh != sw:
        raise ValueError("patch kernel must be [D, C, 1, s, s]")
    if cin_k != cin:
        raise ValueError(f"patch kernel expects {cin_k} channels, got {cin}")
    if h % sh or w_in % sw:
        raise ValueError(f"{h}x{w_in} not divisible into {sh}x{sw} patches")
    ht, wt = h // sh, w_in // sw
    cols = x.reshape(cin, t, ht, sh, wt, sw).transpose(1, 2, 4, 0, 3, 5).reshape(t * ht * wt, cin * sh * sw)
    out = cols @ w.reshape(d_out, cin * sh * sw).transpose(1, 0)
    out = out.reshape(t, ht, wt, d_out).transpose(3, 0, 1, 2)
    return out if b is None else out + b


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g):
        if x.requires_grad:
            _acc(x, g * sig * (1.0 + x.data * (1.0 - sig)))

    return _from_op(out, (x,), bw)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        if x.requires_grad:
            dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
            _acc(x, g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner))

    return _from_op(out, (x,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[L, din] @ w[din, dout] (+ b[dout])."""
    y = x @ w
    return y if b is None else y + b
