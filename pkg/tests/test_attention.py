"""Window partition/reverse bijection, attention oracle equivalence, WAM, swin."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import wincodec.attention as A
import wincodec.tensor as T
from wincodec.gradcheck import check_gradients, check_model_gradients
from wincodec.tensor import Tensor


def rand_params(rng, c, heads=1, window_size=None, relative_bias=False):
    return A.WindowAttentionParams(
        rng, c, heads=heads, window_size=window_size, relative_bias=relative_bias
    )


def test_partition_counts_8x8_m4():
    x = Tensor(np.arange(2 * 8 * 8, dtype=np.float64).reshape(2, 8, 8))
    g = A.window_partition(x, 4)
    assert g.windows.shape == (4, 16, 2)
    assert g.num_windows == 4


def test_partition_single_window_full_map():
    x = Tensor(np.random.default_rng(0).uniform(size=(3, 4, 4)))
    g = A.window_partition(x, 4)
    assert g.windows.shape == (1, 16, 3)


def test_partition_shift_preserves_multiset_and_reverses():
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(size=(2, 8, 8)))
    g = A.window_partition(x, 4, shift=2)
    assert np.array_equal(
        np.sort(g.windows.data.reshape(-1)), np.sort(x.data.reshape(-1))
    )
    back = A.window_reverse(g)
    assert np.array_equal(back.data, x.data)
    # brute-force index map: the roll really is a permutation by (-2,-2)
    expected = np.roll(x.data, (-2, -2), axis=(1, 2))
    tiles = expected.reshape(2, 2, 4, 2, 4).transpose(1, 3, 2, 4, 0).reshape(4, 16, 2)
    assert np.array_equal(g.windows.data, tiles)


@settings(max_examples=60)
@given(
    st.integers(1, 3),
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(1, 6),
    st.integers(0, 5),
)
def test_partition_reverse_bijection(c, h, w, m, shift_raw):
    shift = shift_raw % m
    rng = np.random.default_rng(c * 1000 + h * 100 + w * 10 + m)
    x = Tensor(rng.uniform(-1, 1, (c, h, w)))
    g = A.window_partition(x, m, shift)
    back = A.window_reverse(g)
    assert np.array_equal(back.data, x.data)


def test_zero_transforms_give_uniform_weights(rng):
    c = 4
    p = rand_params(rng, c)
    p.w_theta.data[:] = 0.0
    p.w_phi.data[:] = 0.0
    x = Tensor(rng.uniform(-1, 1, (c, 4, 4)))
    g = A.window_partition(x, 4)
    _, attn = A.window_attention(g, p, return_attn=True)
    assert np.allclose(attn, 1.0 / 16.0)
    # Y_i is then the mean of g(X_j) over the window
    out = A.window_attention(g, p)
    gx = x.data.reshape(c, -1).T @ p.w_g.data  # (16, C)
    expected = gx.mean(axis=0)[None, :] @ p.w_z.data + x.data.reshape(c, -1).T
    assert np.allclose(out.windows.data[0], expected)


def test_weights_sum_to_one(rng):
    for trial in range(5):
        c = 6
        p = rand_params(rng, c, heads=2)
        x = Tensor(rng.uniform(-2, 2, (c, 6, 5)))
        g = A.window_partition(x, 4, shift=trial % 4)
        _, attn = A.window_attention(g, p, return_attn=True)
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        assert (attn >= 0).all()


def test_full_window_matches_global_oracle(rng):
    for trial in range(20):
        c = [2, 4, 6][trial % 3]
        h = w = [3, 4, 5][(trial // 3) % 3]
        heads = 2 if (c % 2 == 0 and trial % 2) else 1
        p = rand_params(rng, c, heads=heads)
        x = Tensor(rng.uniform(-2, 2, (c, h, w)))
        windowed = A.window_attention_map(x, p, m=max(h, w))
        dense = A.global_attention(x, p)
        assert np.max(np.abs(windowed.data - dense.data)) < 1e-6


def test_two_position_closed_form(rng):
    # C=1, two positions, hand-computed scalar softmax
    th, ph, gg, zz = 0.7, -1.3, 0.9, 1.1
    x1, x2 = 0.8, -0.4
    p = rand_params(rng, 1)
    p.w_theta.data[:] = th
    p.w_phi.data[:] = ph
    p.w_g.data[:] = gg
    p.w_z.data[:] = zz
    x = Tensor(np.array([[[x1, x2]]]))  # (1,1,2) map
    g = A.window_partition(x, 2)  # pads to 2x2, padded keys masked
    out, attn = A.window_attention(g, p, return_attn=True)
    l11 = th * x1 * ph * x1
    l12 = th * x1 * ph * x2
    w11 = 1.0 / (1.0 + np.exp(l12 - l11))  # sigma(l11 - l12)
    assert np.isclose(attn[0, 0, 0, 0], w11, atol=1e-12)
    assert np.isclose(attn[0, 0, 0, 1], 1 - w11, atol=1e-12)
    y1 = w11 * gg * x1 + (1 - w11) * gg * x2
    z1 = zz * y1 + x1
    assert np.isclose(out.windows.data[0, 0, 0], z1, atol=1e-12)


def test_global_attention_single_position(rng):
    c = 3
    p = rand_params(rng, c)
    x = Tensor(rng.uniform(-1, 1, (c, 1, 1)))
    out = A.global_attention(x, p)
    expected = (x.data.reshape(1, c) @ p.w_g.data) @ p.w_z.data + x.data.reshape(1, c)
    assert np.allclose(out.data.reshape(c), expected.reshape(c))


def test_global_attention_permutation_equivariant(rng):
    c = 4
    p = rand_params(rng, c)
    x = rng.uniform(-1, 1, (c, 3, 4))
    perm = rng.permutation(12)
    xp = x.reshape(c, 12)[:, perm].reshape(c, 3, 4)
    out = A.global_attention(Tensor(x), p).data.reshape(c, 12)
    outp = A.global_attention(Tensor(xp), p).data.reshape(c, 12)
    assert np.allclose(out[:, perm], outp, atol=1e-12)


def test_wam_zero_init_is_identity(rng):
    wam = A.WAM(rng, 8, window_size=4)
    x = Tensor(rng.uniform(-2, 2, (8, 8, 8)))
    out = wam(x)
    assert np.array_equal(out.data, x.data)


def test_wam_mask_values_in_unit_interval(rng):
    wam = A.WAM(rng, 4, window_size=2)
    wam.mask_out = __import__("wincodec.layers", fromlist=["Conv2d"]).Conv2d(
        rng, 4, 4, 1
    )
    x = Tensor(rng.uniform(-2, 2, (4, 4, 4)))
    t = x
    for rb in wam.trunk:
        t = rb(t)
    a, _ = A.window_attention_map(x, wam.attn, wam.window_size, return_attn=True)
    for rb in wam.mask_rbs:
        a = rb(a)
    m = T.sigmoid(wam.mask_out(a)).data
    assert (m > 0).all() and (m < 1).all()


def test_swin_block_zero_init_projections_identity(rng):
    blk = A.SwinBlock(rng, 4, heads=2, window_size=2, shift=1)
    blk.attn.w_z.data[:] = 0.0
    blk.fc2.weight.data[:] = 0.0
    blk.fc2.bias.data[:] = 0.0
    x = Tensor(rng.uniform(-1, 1, (4, 6, 6)))
    out = blk(x)
    assert np.allclose(out.data, x.data, atol=1e-12)


def test_swin_shift_differs_on_cross_tile_structure(rng):
    # constant within 4x4 tiles, different across tiles: W-MSA sees constant
    # windows, SW-MSA windows straddle tiles, so outputs must differ
    c = 4
    tiles = rng.uniform(-1, 1, (c, 2, 2))
    x = np.repeat(np.repeat(tiles, 4, axis=1), 4, axis=2)
    b0 = A.SwinBlock(rng, c, heads=1, window_size=4, shift=0)
    b2 = A.SwinBlock(rng, c, heads=1, window_size=4, shift=2)
    # share weights so only the shift differs
    b2.load_state(b0.state())
    y0 = b0(Tensor(x)).data
    y2 = b2(Tensor(x)).data
    assert not np.allclose(y0, y2)


def test_swin_block_grads_match_fd(rng):
    blk = A.SwinBlock(rng, 2, heads=1, window_size=2, shift=1)
    x = Tensor(rng.uniform(-1, 1, (2, 4, 4)), requires_grad=True)
    params = [x] + blk.parameters()
    check_model_gradients(lambda: T.square(blk(x)).sum(), params, rtol=1e-4)


def test_window_attention_grads_match_fd(rng):
    p = rand_params(rng, 2, heads=1)
    x = Tensor(rng.uniform(-1, 1, (2, 3, 3)), requires_grad=True)
    params = [x] + p.parameters()
    check_model_gradients(
        lambda: T.square(A.window_attention_map(x, p, m=2, shift=1)).sum(),
        params,
        rtol=1e-4,
    )
