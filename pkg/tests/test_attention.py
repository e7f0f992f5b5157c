import math
import warnings

import numpy as np
import pytest
from _util import param_grad_check
from hypothesis import given, settings
from hypothesis import strategies as st

from sandwich_dit.attention import (
    BlockContext,
    DegenerateDenominatorWarning,
    FullAttention,
    KernelParams,
    LchaAttention,
    LchaConfig,
    PixelDown,
    PixelUp,
    SsaConfig,
    StrideAttention,
    TokenGrid,
    full_attention,
    lcha_block,
    local_conv_path,
    ssa_block,
)
from sandwich_dit.attention.kernels import kernel_map, kv_compress_attention, linear_attention, linear_attention_map
from sandwich_dit.attention.rope import rope3d, rope_angles, rope_pair_split
from sandwich_dit.numerics import Tensor, ops
from sandwich_dit.numerics.rng import Rng


def softplus(x):
    return np.logaddexp(0.0, x)


def rotate(x, positions, base=10000.0):
    """Independent RoPE: rotate consecutive pairs by per-axis angles."""
    ang = rope_angles(positions, x.shape[-1], base)
    out = x.copy()
    for p in range(x.shape[-1] // 2):
        c, s = np.cos(ang[:, p]), np.sin(ang[:, p])
        a, b = x[..., 2 * p], x[..., 2 * p + 1]
        out[..., 2 * p] = a * c - b * s
        out[..., 2 * p + 1] = a * s + b * c
    return out


def quadratic_linear_attention(q, k, v, W, b, causal, positions=None, eps=1e-6):
    """Double-loop reference for the normalized kernel attention."""
    fq = softplus(q @ W.T + b)
    fk = softplus(k @ W.T + b)
    rq = rotate(fq, positions) if positions is not None else fq
    rk = rotate(fk, positions) if positions is not None else fk
    L = q.shape[0]
    out = np.zeros((L, v.shape[1]))
    for i in range(L):
        num = np.zeros(v.shape[1])
        den = 0.0
        for j in range(L):
            if causal and j > i:
                continue
            num += (rq[i] @ rk[j]) * v[j]
            den += fq[i] @ fk[j]
        out[i] = num / (den + eps)
    return out


def test_token_grid_flatten_round_trip():
    g = TokenGrid(2, 3, 4, 5)
    assert g.length == 24
    x = Rng(0).normal(g.shape)
    flat = g.flatten(Tensor(x))
    assert flat.shape == (24, 5)
    assert np.array_equal(g.unflatten(flat).data, x)
    # (t, h, w) order: token index = (t*H + h)*W + w
    assert np.array_equal(flat.data[(1 * 3 + 2) * 4 + 3], x[1, 2, 3])


# -- full attention ----------------------------------------------------------

def test_full_attention_single_token():
    v = Rng(1).normal((1, 4))
    out = full_attention(Rng(2).normal((1, 4)), Rng(3).normal((1, 4)), v)
    np.testing.assert_allclose(out.data, v, atol=1e-15)


def test_full_attention_uniform_scores_average():
    v = Rng(4).normal((6, 3))
    out = full_attention(np.ones((6, 3)), np.ones((6, 3)), v)
    np.testing.assert_allclose(out.data, np.broadcast_to(v.mean(axis=0), (6, 3)), atol=1e-12)


def test_full_attention_causal_matches_prefix_recompute():
    rng = Rng(5)
    q, k, v = (rng.normal((16, 8)) for _ in range(3))
    out = full_attention(q, k, v, causal=True).data
    for i in range(16):
        ref = full_attention(q[i:i + 1], k[:i + 1], v[:i + 1]).data
        np.testing.assert_allclose(out[i], ref[0], atol=1e-6)


def test_full_attention_empty():
    with pytest.raises(ValueError):
        full_attention(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)))


# -- kernel map ----------------------------------------------------------------

def test_kernel_map_identity_at_zero():
    p = KernelParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(kernel_map(np.zeros((3, 4)), p).data, np.log(2.0), atol=1e-15)


def test_kernel_map_positive_for_adversarial_inputs():
    p = KernelParams.init(Rng(6), 8)
    assert kernel_map(np.full((5, 8), -1e3), p).data.min() > 0
    assert kernel_map(Rng(7).normal((5, 8), scale=100.0), p).data.min() > 0


def test_kernel_map_gradients():
    rng = Rng(8)
    x = rng.normal((5, 4))
    w, b = rng.normal((3, 4)), rng.normal(3)
    rep = param_grad_check_fn(lambda x_, w_, b_: kernel_map(x_, KernelParams(w_, b_)), [x, w, b])
    assert rep.passed, rep.line()


def param_grad_check_fn(fn, inputs, tol=1e-4):
    from sandwich_dit.numerics import grad_check
    return grad_check(fn, inputs, tol)


# -- linear attention -------------------------------------------------------------

def test_linear_attention_single_token():
    rng = Rng(9)
    p = KernelParams.init(rng, 4)
    v = rng.normal((1, 4))
    out = linear_attention(rng.normal((1, 4)), rng.normal((1, 4)), v, p).data
    np.testing.assert_allclose(out, v, rtol=1e-5)


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("seed", range(4))
def test_linear_attention_matches_quadratic_oracle(causal, seed):
    rng = Rng(seed).child("lin")
    q, k, v = (rng.normal((32, 8)) for _ in range(3))
    p = KernelParams.init(rng, 8)
    out = linear_attention(q, k, v, p, causal=causal).data
    ref = quadratic_linear_attention(q, k, v, p.weight.data, p.bias.data, causal)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) <= 1e-5


@pytest.mark.parametrize("causal", [False, True])
def test_linear_attention_rope_numerator_only(causal):
    rng = Rng(10)
    grid = TokenGrid(2, 2, 3, 8)
    q, k, v = (rng.normal((grid.length, 6)) for _ in range(3))
    p = KernelParams.init(rng, 6)
    pos = grid.positions(frame_offset=3)
    out = linear_attention(q, k, v, p, positions=pos, causal=causal).data
    ref = quadratic_linear_attention(q, k, v, p.weight.data, p.bias.data, causal, positions=pos)
    assert np.max(np.abs(out - ref)) / np.max(np.abs(ref)) <= 1e-5


def test_linear_attention_convex_on_constant_values():
    rng = Rng(11)
    c = rng.normal(5)
    p = KernelParams.init(rng, 4)
    out = linear_attention(rng.normal((9, 4)), rng.normal((9, 4)), np.tile(c, (9, 1)), p, causal=True).data
    np.testing.assert_allclose(out, np.tile(c, (9, 1)), rtol=1e-5)


def test_linear_attention_segments_are_chunk_causal():
    rng = Rng(12)
    q, k, v = (rng.normal((6, 4)) for _ in range(3))
    p = KernelParams.init(rng, 4)
    seg = np.array([0, 0, 0, 1, 1, 1])
    out = linear_attention(q, k, v, p, causal=True, segments=seg).data
    first = linear_attention(q[:3], k[:3], v[:3], p).data
    full = linear_attention(q, k, v, p).data
    np.testing.assert_allclose(out[:3], first, atol=1e-12)
    np.testing.assert_allclose(out[3:], full[3:], atol=1e-12)


def test_linear_attention_degenerate_denominator_warns():
    rng = Rng(13)
    p = KernelParams(Tensor(np.eye(4)), Tensor(np.full(4, -60.0)))
    with pytest.warns(DegenerateDenominatorWarning):
        linear_attention(rng.normal((3, 4)), rng.normal((3, 4)), rng.normal((3, 4)), p)


def test_attention_map_reproduces_output():
    rng = Rng(14)
    q, k, v = (rng.normal((2, 10, 4)) for _ in range(3))
    p = KernelParams.init(rng, 4, heads=2)
    for causal in (False, True):
        amap = linear_attention_map(q, k, p, causal=causal)
        out = linear_attention(q, k, v, p, causal=causal).data
        np.testing.assert_allclose(np.einsum("hij,hjd->hid", amap, v), out, atol=1e-12)
        np.testing.assert_allclose(amap.sum(axis=-1), 1.0, atol=1e-5)


# -- rope ------------------------------------------------------------------------

def test_rope_origin_is_identity():
    x = Rng(15).normal((1, 10))
    np.testing.assert_array_equal(rope3d(Tensor(x), np.zeros((1, 3), dtype=int)).data, x)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([2, 4, 6, 8, 12]))
def test_rope_is_isometry(seed, d):
    rng = Rng(seed)
    grid = TokenGrid(3, 2, 2, d)
    x = rng.normal((grid.length, d))
    y = rope3d(Tensor(x), grid, frame_offset=int(rng.integers(0, 50))).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-6)


def test_rope_relative_position():
    rng = Rng(16)
    q, k = rng.normal((1, 12)), rng.normal((1, 12))
    m, n = np.array([[2, 1, 3]]), np.array([[5, 0, 1]])
    delta = np.array([[7, 4, 2]])
    a = rope3d(Tensor(q), m).data @ rope3d(Tensor(k), n).data.T
    b = rope3d(Tensor(q), m + delta).data @ rope3d(Tensor(k), n + delta).data.T
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_rope_split_and_errors():
    assert rope_pair_split(12) == (2, 2, 2)
    assert rope_pair_split(8) == (2, 1, 1)
    with pytest.raises(ValueError):
        rope3d(Tensor(np.ones((1, 5))), np.zeros((1, 3)))


# -- local conv path ----------------------------------------------------------------

def naive_causal_conv(x, w, bias, mix_w, mix_b):
    T, H, W, C = x.shape
    kt, kh, kw, _ = w.shape
    out = np.zeros_like(x)
    for t in range(T):
        for h in range(H):
            for ww in range(W):
                for c in range(C):
                    acc = 0.0
                    for a in range(kt):
                        ti = t - (kt - 1) + a
                        if ti < 0:
                            continue
                        for b in range(kh):
                            hi = h + b - kh // 2
                            if not 0 <= hi < H:
                                continue
                            for e in range(kw):
                                wi = ww + e - kw // 2
                                if 0 <= wi < W:
                                    acc += x[ti, hi, wi, c] * w[a, b, e, c]
                    out[t, h, ww, c] = acc + bias[c]
    return out @ mix_w.T + mix_b


def test_conv_delta_kernel_is_identity():
    x = Rng(17).normal((3, 4, 4, 2))
    w = np.zeros((3, 3, 3, 2))
    w[-1, 1, 1] = 1.0
    out = local_conv_path(Tensor(x), Tensor(w), Tensor(np.zeros(2)), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_matches_naive_loops():
    rng = Rng(18)
    x, w = rng.normal((4, 3, 5, 2)), rng.normal((3, 3, 3, 2))
    bias, mix_w, mix_b = rng.normal(2), rng.normal((2, 2)), rng.normal(2)
    out = local_conv_path(Tensor(x), Tensor(w), Tensor(bias), Tensor(mix_w), Tensor(mix_b)).data
    np.testing.assert_allclose(out, naive_causal_conv(x, w, bias, mix_w, mix_b), atol=1e-6)


def test_conv_rejects_even_spatial_kernel():
    with pytest.raises(ValueError):
        local_conv_path(Tensor(np.ones((2, 4, 4, 1))), Tensor(np.ones((3, 2, 3, 1))), Tensor(np.zeros(1)),
                        Tensor(np.eye(1)))


# -- causality suite ------------------------------------------------------------------

def _perturb_after(x, frame, tokens_per_frame, rng):
    y = x.copy()
    y[(frame + 1) * tokens_per_frame:] += rng.normal(y[(frame + 1) * tokens_per_frame:].shape)
    return y


@pytest.mark.parametrize("t", [0, 1, 2])
def test_causal_ops_never_leak_future(t):
    rng = Rng(19).child(t)
    grid = TokenGrid(4, 2, 2, 4)
    tpf = grid.tokens_per_frame
    cut = (t + 1) * tpf
    q, k, v = (rng.normal((grid.length, 4)) for _ in range(3))
    p = KernelParams.init(rng, 4)
    seg = grid.chunk_segments(1)
    pos = grid.positions()

    def lin(q_, k_, v_):
        return linear_attention(q_, k_, v_, p, positions=pos, causal=True, segments=seg).data

    def full(q_, k_, v_):
        return full_attention(q_, k_, v_, causal=True, q_segments=seg, k_segments=seg).data

    for fn in (lin, full):
        base = fn(q, k, v)
        pert = fn(*(_perturb_after(a, t, tpf, rng) for a in (q, k, v)))
        assert np.array_equal(base[:cut], pert[:cut])
    x = rng.normal(grid.shape)
    w = rng.normal((3, 3, 3, 4))
    conv = lambda x_: local_conv_path(Tensor(x_), Tensor(w), Tensor(np.zeros(4)), Tensor(np.eye(4))).data
    x2 = x.copy()
    x2[t + 1:] += 1.0
    assert np.array_equal(conv(x)[:t + 1], conv(x2)[:t + 1])
    ring = x[:2]
    streamed = local_conv_path(Tensor(x[2:]), Tensor(w), Tensor(np.zeros(4)), Tensor(np.eye(4)),
                               history=Tensor(ring)).data
    np.testing.assert_allclose(streamed, conv(x)[2:], atol=1e-12)


# -- LCHA -------------------------------------------------------------------------------

def _lcha(rng, **kw):
    cfg = LchaConfig(width=8, heads=2, head_dim=4, **kw)
    return LchaAttention(cfg, rng)


def test_gate_saturation_and_half_mix():
    rng = Rng(20)
    mixer = _lcha(rng)
    grid = TokenGrid(2, 2, 2, 8)
    ctx = BlockContext(grid, causal=True, chunk_frames=1)
    h = Tensor(rng.normal((grid.length, 8)))
    lin, conv = mixer.branches(h, ctx)
    mixer.alpha = Tensor(np.asarray(0.0), requires_grad=True)
    np.testing.assert_array_equal(mixer(h, ctx).data, 0.5 * lin.data + 0.5 * conv.data)
    mixer.alpha = Tensor(np.asarray(60.0), requires_grad=True)
    np.testing.assert_allclose(mixer(h, ctx).data, lin.data, atol=1e-20 + 1e-12 * np.abs(lin.data).max())


def test_gate_sweep_is_monotone():
    rng = Rng(21)
    mixer = _lcha(rng)
    grid = TokenGrid(1, 2, 2, 8)
    ctx = BlockContext(grid)
    h = Tensor(rng.normal((grid.length, 8)))
    lin, conv = (b.data for b in mixer.branches(h, ctx))
    direction = (lin - conv).ravel()
    coords = []
    for a in np.linspace(-10, 10, 41):
        mixer.alpha = Tensor(np.asarray(a), requires_grad=True)
        coords.append(float((mixer(h, ctx).data.ravel() - conv.ravel()) @ direction))
    assert all(b > a for a, b in zip(coords, coords[1:]))


def test_lcha_block_parameter_gradients():
    rng = Rng(22)
    cfg = LchaConfig(width=4, heads=1, head_dim=4)
    block = lcha_block(cfg, 3, rng, key="L")
    grid = TokenGrid(2, 2, 2, 4)
    ctx = BlockContext(grid, causal=True, chunk_frames=1)
    x = Tensor(rng.normal((grid.length, 4)))
    cond = Tensor(rng.normal((2, 3)))
    names = ["mixer.alpha", "mixer.kernel_weight", "mixer.kernel_bias", "mixer.conv_weight", "mixer.conv_bias",
             "mixer.mix.weight", "mixer.wq.weight", "mixer.wk.weight", "mixer.wv.weight", "mixer.wo.weight",
             "ada.proj.weight", "ada.proj.bias", "norm1.gamma", "mlp.fc1.weight"]
    assert set(names) <= set(block.named_parameters())
    rep = param_grad_check(block, lambda: block(x, cond, ctx), names)
    assert rep.passed, rep.per_input


def test_ssa_block_parameter_gradients():
    rng = Rng(23)
    block = ssa_block(SsaConfig(width=4, heads=2, head_dim=2, low_width=6), 3, rng, key="S")
    grid = TokenGrid(2, 4, 4, 4)
    ctx = BlockContext(grid)
    x = Tensor(rng.normal((grid.length, 4)))
    cond = Tensor(rng.normal((2, 3)))
    names = sorted(block.named_parameters())
    rep = param_grad_check(block, lambda: block(x, cond, ctx), names)
    assert rep.passed, list(zip(names, rep.per_input))


def test_adaln_gates_in_unit_interval():
    rng = Rng(24)
    block = lcha_block(LchaConfig(width=4, heads=1, head_dim=4), 3, rng)
    ada = block.ada(Tensor(rng.normal((5, 3), scale=50.0)))
    for g in (ada.gate_attn, ada.gate_mlp):
        assert (g.data >= 0).all() and (g.data <= 1).all()


def test_lcha_config_validation():
    with pytest.raises(ValueError):
        LchaConfig(width=8, head_dim=0)
    with pytest.raises(ValueError):
        LchaConfig(width=8, conv_kernel=(3, 2, 3))


# -- SSA / KV compression ------------------------------------------------------------

def test_ssa_stride_one_is_full_attention():
    rng = Rng(25)
    ssa = StrideAttention(SsaConfig(width=6, heads=2, head_dim=3, stride=1), rng, identity_projections=True)
    full = FullAttention(6, 2, 3, Rng(99))
    full.load_state_dict(ssa.attn.state_dict())
    grid = TokenGrid(2, 3, 3, 6)
    h = Tensor(rng.normal((grid.length, 6)))
    np.testing.assert_allclose(ssa(h, BlockContext(grid)).data, full(h, BlockContext(grid)).data, atol=1e-14)


def test_ssa_token_reduction():
    stats = {}
    ssa = StrideAttention(SsaConfig(width=4, heads=1, head_dim=4, stride=2), Rng(26))
    grid = TokenGrid(2, 4, 4, 4)
    ssa(Tensor(Rng(27).normal((grid.length, 4))), BlockContext(grid, stats=stats))
    assert stats["ssa"] == 8 == grid.length // 4


def test_pixel_down_up_round_trip():
    grid = TokenGrid(2, 4, 6, 3)
    x = Rng(28).normal((grid.length, 3))
    low, lg = PixelDown(3, 2, 12, identity=True)(Tensor(x), grid)
    assert lg.length == grid.length // 4
    back, hg = PixelUp(12, 2, 3, identity=True)(low, lg)
    assert hg == grid
    np.testing.assert_allclose(back.data, x, atol=1e-6)


def test_ssa_indivisible_grid():
    ssa = StrideAttention(SsaConfig(width=4, heads=1, head_dim=4), Rng(29))
    grid = TokenGrid(1, 3, 4, 4)
    with pytest.raises(ValueError):
        ssa(Tensor(np.ones((grid.length, 4))), BlockContext(grid))


def test_kv_compress_stride_one_is_full():
    rng = Rng(30)
    grid = TokenGrid(2, 2, 2, 4)
    q, k, v = (rng.normal((grid.length, 4)) for _ in range(3))
    np.testing.assert_allclose(kv_compress_attention(q, k, v, grid, 1).data, full_attention(q, k, v).data,
                               atol=1e-14)


def test_kv_compress_constant_values_and_pooled_oracle():
    rng = Rng(31)
    grid = TokenGrid(2, 4, 4, 4)
    q, k, v = (rng.normal((grid.length, 4)) for _ in range(3))
    const = np.tile(rng.normal(4), (grid.length, 1))
    np.testing.assert_allclose(kv_compress_attention(q, k, const, grid, 2).data, const, atol=1e-12)
    pooled_k = k.reshape(2, 2, 2, 2, 2, 4).mean(axis=(2, 4)).reshape(-1, 4)
    pooled_v = v.reshape(2, 2, 2, 2, 2, 4).mean(axis=(2, 4)).reshape(-1, 4)
    s = q @ pooled_k.T / math.sqrt(4)
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(kv_compress_attention(q, k, v, grid, 2).data, w @ pooled_v, atol=1e-6)
    with pytest.raises(ValueError):
        kv_compress_attention(q, k, v, grid, 3)
