"""Window-restricted attention and its global (dense) baseline.

The core map is embedded-Gaussian attention inside non-overlapping
M x M windows: per window, weights softmax over theta(x_i)^T phi(x_j)
(scaled by 1/sqrt(d_head)), applied to g(x_j), then a channel projection
plus residual.  Shifted windows are realised by a cyclic roll plus an
additive logit mask built from region ids (so attention never crosses a
wrap-around seam); maps that do not tile evenly are zero-padded and the
padded keys are masked out.

``global_attention`` is an independent dense O(N^2) implementation over
the whole map; with a window covering the full map the two must agree,
which the test suite uses as the oracle for the windowed path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2d, LayerNorm, Linear, Module, gelu, normal_init, _param
from .tensor import Tensor

NEG_INF = -1e9


@dataclass
class WindowGrid:
    """(num_windows, M*M, C) view of a feature map plus layout metadata."""

    windows: Tensor
    window_size: int
    shift: int
    orig_h: int
    orig_w: int
    pad_h: int
    pad_w: int
    nwh: int
    nww: int
    attn_bias: np.ndarray | None  # (nW, M*M, M*M) additive logit mask or None

    @property
    def num_windows(self):
        return self.nwh * self.nww


_MASK_CACHE = {}


def _partition_mask(h, w, m, shift):
    """Additive logit mask combining shift regions and padding validity."""
    key = (h, w, m, shift)
    cached = _MASK_CACHE.get(key)
    if cached is not None:
        return cached
    pad_h = -(-h // m) * m
    pad_w = -(-w // m) * m
    nwh, nww = pad_h // m, pad_w // m
    need_valid = (pad_h != h) or (pad_w != w)
    if shift == 0 and not need_valid:
        result = (pad_h, pad_w, nwh, nww, None)
        _MASK_CACHE[key] = result
        return result

    def tile(a):  # (pad_h, pad_w) -> (nW, m*m)
        return (
            a.reshape(nwh, m, nww, m).transpose(0, 2, 1, 3).reshape(nwh * nww, m * m)
        )

    valid = np.zeros((pad_h, pad_w), dtype=bool)
    valid[:h, :w] = True
    if shift:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
    valid_t = tile(valid)

    if shift:
        ids = np.zeros((pad_h, pad_w), dtype=np.int64)
        cnt = 0
        for hs in (slice(0, pad_h - m), slice(pad_h - m, pad_h - shift), slice(pad_h - shift, pad_h)):
            for ws in (slice(0, pad_w - m), slice(pad_w - m, pad_w - shift), slice(pad_w - shift, pad_w)):
                ids[hs, ws] = cnt
                cnt += 1
        ids_t = tile(ids)
        same = ids_t[:, :, None] == ids_t[:, None, :]
    else:
        same = np.ones((nwh * nww, m * m, m * m), dtype=bool)

    keep = same & valid_t[:, None, :]
    bias = np.where(keep, 0.0, NEG_INF)
    # every valid query can at least attend to itself
    diag = bias[:, np.arange(m * m), np.arange(m * m)]
    assert (diag[valid_t] == 0.0).all(), "window mask eliminated a query's own key"
    result = (pad_h, pad_w, nwh, nww, bias)
    _MASK_CACHE[key] = result
    return result


def window_partition(x, m, shift=0):
    """Split (C,H,W) into non-overlapping M x M windows, cyclically shifted."""
    c, h, w = x.shape
    if m < 1:
        raise ValueError("window size must be >= 1")
    if shift < 0 or shift >= m:
        raise ValueError("shift must lie in [0, M)")
    pad_h, pad_w, nwh, nww, bias = _partition_mask(h, w, m, shift)
    t = x
    if pad_h != h or pad_w != w:
        t = T.pad2d(t, 0, pad_h - h, 0, pad_w - w)
    if shift:
        t = T.roll(t, (-shift, -shift), (1, 2))
    t = T.reshape(t, (c, nwh, m, nww, m))
    t = T.transpose(t, (1, 3, 2, 4, 0))  # (nwh, nww, m, m, C)
    win = T.reshape(t, (nwh * nww, m * m, c))
    return WindowGrid(win, m, shift, h, w, pad_h, pad_w, nwh, nww, bias)


def window_reverse(grid):
    """Exact inverse of window_partition (crop padding, undo the shift)."""
    m, c = grid.window_size, grid.windows.shape[-1]
    t = T.reshape(grid.windows, (grid.nwh, grid.nww, m, m, c))
    t = T.transpose(t, (4, 0, 2, 1, 3))  # (C, nwh, m, nww, m)
    t = T.reshape(t, (c, grid.pad_h, grid.pad_w))
    if grid.shift:
        t = T.roll(t, (grid.shift, grid.shift), (1, 2))
    if grid.pad_h != grid.orig_h or grid.pad_w != grid.orig_w:
        t = T.crop2d(t, 0, grid.pad_h - grid.orig_h, 0, grid.pad_w - grid.orig_w)
    return t


_REL_INDEX_CACHE = {}


def _relative_index(m, heads):
    key = (m, heads)
    cached = _REL_INDEX_CACHE.get(key)
    if cached is not None:
        return cached
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), indexing="ij"))
    flat = coords.reshape(2, -1)
    rel = flat[:, :, None] - flat[:, None, :] + (m - 1)
    idx = rel[0] * (2 * m - 1) + rel[1]  # (N, N) into the (2M-1)^2 table rows
    idx2 = idx[:, :, None] * heads + np.arange(heads)[None, None, :]
    _REL_INDEX_CACHE[key] = idx2
    return idx2


class WindowAttentionParams(Module):
    """Per-channel transforms for embedded-Gaussian window attention.

    ``relative_bias`` adds the Swin-style learned relative position term
    (used by W-MSA/SW-MSA blocks, excluded from the WAM window block and
    the global baseline so the locality contrast stays clean).
    """

    def __init__(self, rng, channels, heads=1, window_size=None, relative_bias=False,
                 scaled=True):
        if channels % heads:
            raise ValueError(f"heads ({heads}) must divide channels ({channels})")
        self.w_theta = normal_init(rng, (channels, channels))
        self.w_phi = normal_init(rng, (channels, channels))
        self.w_g = normal_init(rng, (channels, channels))
        self.w_z = normal_init(rng, (channels, channels))
        self.heads = heads
        self.scaled = scaled
        self.window_size = window_size
        if relative_bias:
            if window_size is None:
                raise ValueError("relative_bias needs a fixed window_size")
            self.rel_bias = _param(np.zeros(((2 * window_size - 1) ** 2) * heads))
        else:
            self.rel_bias = None


def _attend(tokens, p, attn_bias=None, rel_index=None):
    """softmax(Q K^T / sqrt(d_head) + biases) V followed by W_z.

    tokens: (B, N, C).  Returns (out_tokens, attention weights ndarray).
    """
    b, n, c = tokens.shape
    h = p.heads
    dh = c // h
    q = T.matmul(tokens, p.w_theta)
    k = T.matmul(tokens, p.w_phi)
    v = T.matmul(tokens, p.w_g)

    def split_heads(t):
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    if p.scaled:
        logits = logits * (1.0 / np.sqrt(dh))
    if p.rel_bias is not None:
        idx2 = rel_index if rel_index is not None else _relative_index(
            p.window_size, h
        )
        bias = T.transpose(T.take(p.rel_bias, idx2), (2, 0, 1))  # (h, N, N)
        logits = logits + T.reshape(bias, (1, h, n, n))
    if attn_bias is not None:
        logits = logits + Tensor(
            attn_bias.reshape(b, 1, n, n).astype(tokens.dtype, copy=False)
        )
    attn = T.softmax(logits, axis=-1)
    y = T.matmul(attn, v)  # (B, h, N, dh)
    y = T.reshape(T.transpose(y, (0, 2, 1, 3)), (b, n, c))
    return T.matmul(y, p.w_z), attn.data


def window_attention(grid, p, return_attn=False):
    """Eq.-style window attention with residual: Z = W_z Y + X per window."""
    out, attn = _attend(grid.windows, p, attn_bias=grid.attn_bias)
    res = WindowGrid(
        out + grid.windows,
        grid.window_size,
        grid.shift,
        grid.orig_h,
        grid.orig_w,
        grid.pad_h,
        grid.pad_w,
        grid.nwh,
        grid.nww,
        grid.attn_bias,
    )
    return (res, attn) if return_attn else res


def window_attention_map(x, p, m, shift=0, return_attn=False):
    """Convenience wrapper: (C,H,W) -> (C,H,W) through window attention."""
    grid = window_partition(x, m, shift)
    out = window_attention(grid, p, return_attn=return_attn)
    if return_attn:
        return window_reverse(out[0]), out[1]
    return window_reverse(out)


def global_attention(x, p, return_attn=False):
    """Dense non-local attention over the entire map (O(N^2) reference).

    Single window covering every position; no positional bias, so the
    map is permutation-equivariant over spatial locations.
    """
    c, h, w = x.shape
    tokens = T.reshape(T.transpose(T.reshape(x, (c, h * w)), (1, 0)), (1, h * w, c))
    out, attn = _attend(tokens, p)
    z = out + tokens
    z = T.transpose(T.reshape(z, (h * w, c)), (1, 0))
    z = T.reshape(z, (c, h, w))
    return (z, attn) if return_attn else z


class SwinBlock(Module):
    """LN -> (S)W-MSA -> residual -> LN -> MLP(ratio 4, GELU) -> residual."""

    def __init__(self, rng, channels, heads, window_size, shift, mlp_ratio=4):
        self.norm1 = LayerNorm(channels)
        self.attn = WindowAttentionParams(
            rng, channels, heads=heads, window_size=window_size, relative_bias=True
        )
        self.norm2 = LayerNorm(channels)
        self.fc1 = Linear(rng, channels, mlp_ratio * channels)
        self.fc2 = Linear(rng, mlp_ratio * channels, channels)
        self.window_size = window_size
        self.shift = shift

    def __call__(self, x):
        c, h, w = x.shape
        grid = window_partition(x, self.window_size, self.shift)
        normed = self.norm1(grid.windows)
        out, _ = _attend(normed, self.attn, attn_bias=grid.attn_bias)
        attn_grid = WindowGrid(
            out, grid.window_size, grid.shift, grid.orig_h, grid.orig_w,
            grid.pad_h, grid.pad_w, grid.nwh, grid.nww, grid.attn_bias,
        )
        x = x + window_reverse(attn_grid)
        tokens = T.transpose(T.reshape(x, (c, h * w)), (1, 0))
        y = self.fc2(gelu(self.fc1(self.norm2(tokens))))
        return x + T.reshape(T.transpose(y, (1, 0)), (c, h, w))


class ResidualBlock(Module):
    """1x1 (C/2) -> 3x3 (C/2) -> 1x1 (C) with residual."""

    def __init__(self, rng, channels):
        half = max(channels // 2, 1)
        self.conv1 = Conv2d(rng, channels, half, 1)
        self.conv2 = Conv2d(rng, half, half, 3)
        self.conv3 = Conv2d(rng, half, channels, 1)

    def __call__(self, x):
        t = T.relu(self.conv1(x))
        t = T.relu(self.conv2(t))
        return x + self.conv3(t)


class WAM(Module):
    """Window attention module: x + trunk(x) * sigmoid(mask(x)).

    Trunk: 3 residual blocks then a zero-initialized 1x1 conv, so a
    freshly inserted module is exactly the identity.  Mask branch: an
    attention block (window-restricted, or global for the non-local
    baseline), 3 residual blocks, 1x1 conv, sigmoid.
    """

    def __init__(self, rng, channels, window_size=4, mode="window", heads=1):
        if mode not in ("window", "global"):
            raise ValueError(f"unknown WAM mode: {mode}")
        self.trunk = [ResidualBlock(rng, channels) for _ in range(3)]
        self.trunk_out = Conv2d(rng, channels, channels, 1, zero_init=True)
        self.attn = WindowAttentionParams(rng, channels, heads=heads)
        self.mask_rbs = [ResidualBlock(rng, channels) for _ in range(3)]
        self.mask_out = Conv2d(rng, channels, channels, 1, zero_init=True)
        self.window_size = window_size
        self.mode = mode
        self.last_attn = None
        self.capture_attn = False

    def __call__(self, x):
        t = x
        for rb in self.trunk:
            t = rb(t)
        t = self.trunk_out(t)
        if self.mode == "window":
            a, attn = window_attention_map(x, self.attn, self.window_size, return_attn=True)
        else:
            a, attn = global_attention(x, self.attn, return_attn=True)
        if self.capture_attn:
            self.last_attn = attn
        for rb in self.mask_rbs:
            a = rb(a)
        m = T.sigmoid(self.mask_out(a))
        return x + t * m
