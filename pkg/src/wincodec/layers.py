"""Neural building blocks shared by both codec architectures.

Conv layers are im2col + matmul on tape primitives, so their VJPs (and
the conv/transposed-conv adjoint pair) come from the engine itself.
GDN stores beta/gamma through a squared-offset reparameterization
(param^2 + 1e-6), so positivity never needs a projection step, and the
inverse form is the exact analytical inverse: solving the per-pixel
linear system (I - diag(y^2) Gamma) s = y^2 * beta recovers the squared
input, after which x = y * sqrt(beta + Gamma s).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

SQRT_2_OVER_PI = 0.7978845608028654


def _collect_params(val, key, out):
    if isinstance(val, Tensor):
        if val.requires_grad:
            out[key] = val
    elif isinstance(val, Module):
        for k, v in val.named_parameters().items():
            out[f"{key}.{k}"] = v
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            _collect_params(item, f"{key}.{i}", out)


class Module:
    """Lightweight parameter container; walks attributes for checkpointing."""

    def named_parameters(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            _collect_params(val, f"{prefix}{name}", out)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def param_count(self):
        return sum(p.size for p in self.parameters())

    def cast_(self, dtype):
        """In-place dtype cast of all parameters (f32 for the coding path)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def load_state(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            if tuple(state[name].shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}")
            p.data = state[name].astype(p.data.dtype)

    def state(self):
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def _param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def normal_init(rng, shape, std=0.02):
    return _param(rng.normal(0.0, std, size=shape))


def fanin_init(rng, shape):
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
    return _param(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape))


# -- activations -----------------------------------------------------------------


def gelu(x):
    """tanh-approximated GELU (deterministic across platforms)."""
    inner = SQRT_2_OVER_PI * (x + 0.044715 * (T.square(x) * x))
    return 0.5 * x * (T.tanh(inner) + 1.0)


# -- linear / norm -----------------------------------------------------------------


class Linear(Module):
    def __init__(self, rng, din, dout, bias=True, std=0.02, zero_init=False):
        if zero_init:
            self.weight = _param(np.zeros((din, dout)))
        else:
            self.weight = normal_init(rng, (din, dout), std=std)
        self.bias = _param(np.zeros(dout)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    """Zero mean / unit variance over the trailing (channel) axis, eps 1e-5."""

    def __init__(self, dim, eps=1e-5):
        self.gain = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        mu = T.tmean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.tmean(T.square(centered), axis=-1, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gain + self.bias


def layer_norm(x, gain, bias, eps=1e-5):
    mu = T.tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = T.tmean(T.square(centered), axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps) * gain + bias


# -- convolution --------------------------------------------------------------------

_IM2COL_CACHE = {}

# incremented by every conv2d/conv_transpose2d call; the STF construction
# audit snapshots it to prove the transformer path is conv-free
_CONV_CALLS = [0]


def conv_calls():
    return _CONV_CALLS[0]


def _im2col_indices(cin, hp, wp, kh, kw, stride):
    key = (cin, hp, wp, kh, kw, stride)
    cached = _IM2COL_CACHE.get(key)
    if cached is not None:
        return cached
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    c = np.repeat(np.arange(cin), kh * kw)
    ki = np.tile(np.repeat(np.arange(kh), kw), cin)
    kj = np.tile(np.arange(kw), cin * kh)
    rows = c * (hp * wp) + ki * wp + kj  # (cin*kh*kw,)
    oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    offs = (oi * stride * wp + oj * stride).reshape(-1)  # (ho*wo,)
    idx = rows[:, None] + offs[None, :]
    result = (idx, ho, wo)
    _IM2COL_CACHE[key] = result
    return result


_DILATE_CACHE = {}


def _dilate_indices(h, w, stride):
    key = (h, w, stride)
    cached = _DILATE_CACHE.get(key)
    if cached is not None:
        return cached
    hd = (h - 1) * stride + 1
    wd = (w - 1) * stride + 1
    ri, rj = np.meshgrid(np.arange(h) * stride, np.arange(w) * stride, indexing="ij")
    idx = (ri * wd + rj).reshape(-1)
    result = (idx, hd, wd)
    _DILATE_CACHE[key] = result
    return result


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of (C_in,H,W) with weight (C_out,C_in,kh,kw)."""
    _CONV_CALLS[0] += 1
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("conv2d: spatial dims smaller than kernel extent")
    xp = T.pad2d(x, padding, padding, padding, padding) if padding else x
    hp, wp = h + 2 * padding, w + 2 * padding
    idx, ho, wo = _im2col_indices(cin, hp, wp, kh, kw, stride)
    cols = T.take(xp, idx)  # (cin*kh*kw, ho*wo)
    wmat = T.reshape(weight, (cout, cin * kh * kw))
    out = T.matmul(wmat, cols)
    if bias is not None:
        out = out + T.reshape(bias, (cout, 1))
    return T.reshape(out, (cout, ho, wo))


def flip_last2(a):
    a = T._as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data[..., ::-1, ::-1]))
    return T._record(
        out, (a,), lambda g: (np.ascontiguousarray(g[..., ::-1, ::-1]),)
    )


def conv_transpose2d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed conv: dilate by stride, pad, convolve with the flipped kernel.

    The weight keeps its conv orientation (C_fwd_out, C_fwd_in, kh, kw);
    here it is applied adjointly, mapping C_fwd_out -> C_fwd_in, so this
    operator is the exact adjoint of conv2d with matching geometry.
    """
    cin, h, w = x.shape
    wcout, wcin, kh, kw = weight.shape
    if cin != wcout:
        raise ValueError(f"conv_transpose2d channel mismatch: input {cin}, weight {wcout}")
    if stride > 1:
        idx, hd, wd = _dilate_indices(h, w, stride)
        full = (idx[None, :] + np.arange(cin)[:, None] * (hd * wd)).reshape(-1)
        xd = T.reshape(
            T.scatter_add(T.reshape(x, (cin * h * w,)), full, (cin * hd * wd,)),
            (cin, hd, wd),
        )
    else:
        xd = x
        hd, wd = h, w
    pt = kh - 1 - padding
    pl = kw - 1 - padding
    assert pt >= 0 and pl >= 0, "conv_transpose2d: padding > kernel-1 unsupported"
    xp = T.pad2d(xd, pt, pt + output_padding, pl, pl + output_padding)
    kernel = flip_last2(T.transpose(weight, (1, 0, 2, 3)))
    return conv2d(xp, kernel, bias=bias, stride=1, padding=0)


class Conv2d(Module):
    """Conv or transposed conv with owned parameters."""

    def __init__(self, rng, cin, cout, kernel, stride=1, padding=None, transposed=False,
                 output_padding=0, bias=True, zero_init=False):
        if padding is None:
            padding = kernel // 2
        # transposed layers keep the weight in forward-conv orientation
        shape = (cin, cout, kernel, kernel) if transposed else (cout, cin, kernel, kernel)
        self.weight = _param(np.zeros(shape)) if zero_init else fanin_init(rng, shape)
        self.bias = _param(np.zeros(cout)) if bias else None
        self.stride = stride
        self.padding = padding
        self.transposed = transposed
        self.output_padding = output_padding

    def __call__(self, x):
        if self.transposed:
            return conv_transpose2d(
                x, self.weight, self.bias, self.stride, self.padding, self.output_padding
            )
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


# -- GDN ---------------------------------------------------------------------------


def gdn(x, beta, gamma, inverse=False):
    """Divisive normalization y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2).

    The inverse form solves for the squared signal so that
    igdn(gdn(x)) == x analytically (per-pixel C x C linear system).
    """
    c, h, w = x.shape
    x2 = T.reshape(T.square(x), (c, h * w))
    if not inverse:
        denom2 = T.matmul(gamma, x2) + T.reshape(beta, (c, 1))
        assert (denom2.data > 0).all(), "gdn: non-positive denominator"
        return x / T.reshape(T.sqrt(denom2), (c, h, w))
    y2 = T.transpose(x2, (1, 0))  # (P, C)
    eye = Tensor(np.eye(c, dtype=x.dtype))
    a = eye - T.reshape(y2, (h * w, c, 1)) * T.reshape(gamma, (1, c, c))
    b = y2 * T.reshape(beta, (1, c))
    s = T.clamp(T.linear_solve(a, b), lo=0.0)
    scale = T.sqrt(T.matmul(s, T.transpose(gamma, (1, 0))) + T.reshape(beta, (1, c)))
    return x * T.reshape(T.transpose(scale, (1, 0)), (c, h, w))


class GDN(Module):
    """GDN/IGDN layer with reparameterized positive parameters."""

    FLOOR = 1e-6

    def __init__(self, channels, inverse=False, beta_init=1.0, gamma_init=0.1):
        self.inverse = inverse
        self.raw_beta = _param(np.full(channels, np.sqrt(beta_init - self.FLOOR)))
        self.raw_gamma = _param(np.sqrt(gamma_init - self.FLOOR) * np.eye(channels))

    def materialize(self):
        beta = T.square(self.raw_beta) + self.FLOOR
        gamma = T.square(self.raw_gamma) + self.FLOOR
        return beta, gamma

    def __call__(self, x):
        beta, gamma = self.materialize()
        return gdn(x, beta, gamma, inverse=self.inverse)
