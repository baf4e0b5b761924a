"""Rate modeling and quantization.

Coding convention: the integer symbol for a latent element is
round(y - mu); reconstruction is symbol + mu followed by the learned
latent-residual correction (0.5 * tanh of a small net).  Symbols are
therefore mean-centered, so a single sigma-indexed family of fixed CDF
tables (64 log-spaced levels over [0.04, 64]) serves every element, and
values outside [-127, 127] fall back to an escape symbol coded as a raw
sign+magnitude 16-bit literal.

During training the rate term sees additive uniform noise while the
distortion path uses straight-through rounding; both evaluate the same
Gaussian (or per-channel logistic, for the hyper-latent) bin masses,
floored at 2^-16.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from . import tensor as T
from .layers import Conv2d, Module, gelu, _param
from .tensor import Tensor

SIGMA_MIN = 0.04
SIGMA_MAX = 64.0
GRID_LEVELS = 64
GRID_VERSION = 1
CDF_PRECISION = 16
CDF_TOTAL = 1 << CDF_PRECISION
LIKELIHOOD_FLOOR = 2.0 ** -16
SYMBOL_BOUND = 127  # alphabet [-127, 127] plus escape
LOG2E = 1.4426950408889634
_INV_SQRT2 = 1.0 / np.sqrt(2.0)


# -- quantization -------------------------------------------------------------------


def quantize(y, mu, mode="eval"):
    """round(y - mu) + mu; straight-through gradients in train mode."""
    if mode == "train":
        return T.round_ste(y - mu) + mu
    if mode == "eval":
        return Tensor(np.round(y.data - mu.data) + mu.data)
    raise ValueError(f"unknown quantize mode {mode!r}")


def add_uniform_noise(y, rng):
    """Rate surrogate y + U(-1/2, 1/2) (noise is a constant on the tape)."""
    noise = rng.uniform(-0.5, 0.5, size=y.shape).astype(y.dtype.type if hasattr(y.dtype, "type") else y.dtype)
    return y + Tensor(noise)


# -- continuous rates ----------------------------------------------------------------


def _gaussian_bin_mass(delta, sigma):
    up = T.erf((delta + 0.5) / sigma * _INV_SQRT2)
    lo = T.erf((delta - 0.5) / sigma * _INV_SQRT2)
    return 0.5 * (up - lo)


def gaussian_rate(y_sur, mu, sigma):
    """Total bits: sum of -log2 P(round to the unit bin) under N(mu, sigma^2)."""
    mass = T.clamp(_gaussian_bin_mass(y_sur - mu, sigma), LIKELIHOOD_FLOOR, 1.0)
    return T.tsum(T.log(mass)) * (-LOG2E)


def gaussian_bits_from_symbols(symbols, sigma):
    """Float64 per-element bits for integer symbols (hard-quantized estimate)."""
    s = np.asarray(sigma, dtype=np.float64)
    d = np.asarray(symbols, dtype=np.float64)
    mass = 0.5 * (
        _special.erf((d + 0.5) / s * _INV_SQRT2) - _special.erf((d - 0.5) / s * _INV_SQRT2)
    )
    return -np.log2(np.clip(mass, LIKELIHOOD_FLOOR, 1.0))


def _logistic_bin_mass(delta, scale):
    return T.sigmoid((delta + 0.5) / scale) - T.sigmoid((delta - 0.5) / scale)


def logistic_bits_from_symbols(symbols, loc, scale):
    d = np.asarray(symbols, dtype=np.float64) - np.asarray(loc, dtype=np.float64)
    b = np.asarray(scale, dtype=np.float64)
    mass = _special.expit((d + 0.5) / b) - _special.expit((d - 0.5) / b)
    return -np.log2(np.clip(mass, LIKELIHOOD_FLOOR, 1.0))


class LogisticPrior(Module):
    """Learned per-channel logistic prior for the hyper-latent."""

    SCALE_MIN = 1e-2
    SCALE_MAX = 256.0

    def __init__(self, channels):
        self.loc = _param(np.zeros(channels))
        self.log_scale = _param(np.zeros(channels))
        self.channels = channels

    def scale(self):
        return T.clamp(T.exp(self.log_scale), self.SCALE_MIN, self.SCALE_MAX)

    def rate(self, z_sur):
        """Total bits for (C,h,w) hyper-latent under the factorized model."""
        c = z_sur.shape[0]
        delta = z_sur - T.reshape(self.loc, (c, 1, 1))
        mass = _logistic_bin_mass(delta, T.reshape(self.scale(), (c, 1, 1)))
        mass = T.clamp(mass, LIKELIHOOD_FLOOR, 1.0)
        return T.tsum(T.log(mass)) * (-LOG2E)

    def bits_from_symbols(self, symbols):
        loc = self.loc.data.astype(np.float64)[:, None, None]
        scale = np.clip(
            np.exp(self.log_scale.data.astype(np.float64)), self.SCALE_MIN, self.SCALE_MAX
        )[:, None, None]
        return logistic_bits_from_symbols(symbols, loc, scale)

    def cdf_tables(self):
        """One quantized CDF table per channel (deterministic rebuild)."""
        loc = self.loc.data.astype(np.float64)
        scale = np.clip(
            np.exp(self.log_scale.data.astype(np.float64)), self.SCALE_MIN, self.SCALE_MAX
        )
        ks = np.arange(-SYMBOL_BOUND, SYMBOL_BOUND + 1, dtype=np.float64)
        tables = []
        for c in range(self.channels):
            d = ks - loc[c]
            pmf = _special.expit((d + 0.5) / scale[c]) - _special.expit((d - 0.5) / scale[c])
            tables.append(_finish_table(pmf))
        return tables


# -- channel-conditional context -----------------------------------------------------


class SliceNet(Module):
    """Two 1x1 conv layers with GELU; zero-initialized final projection."""

    def __init__(self, rng, cin, hidden, cout):
        self.conv1 = Conv2d(rng, cin, hidden, 1)
        self.conv2 = Conv2d(rng, hidden, cout, 1, zero_init=True)

    def __call__(self, x):
        return self.conv2(gelu(self.conv1(x)))


class ChannelContext(Module):
    """Per-slice (mu, sigma) prediction plus latent-residual correction.

    Slice s conditions on the hyper features and every already-decoded
    slice < s; the LRP net additionally sees slice s itself.  The same
    code runs on the encode and decode side, which is what makes the
    reconstruction bit-exact.
    """

    def __init__(self, rng, latent_channels, hyper_channels_out, num_slices,
                 hidden=48, lrp=True, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
        if latent_channels % num_slices:
            raise ValueError("num_slices must divide latent_channels")
        width = latent_channels // num_slices
        self.ranges = [(s * width, width) for s in range(num_slices)]
        self.num_slices = num_slices
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.param_nets = [
            SliceNet(rng, hyper_channels_out + s * width, hidden, 2 * width)
            for s in range(num_slices)
        ]
        self.lrp_nets = (
            [
                SliceNet(rng, hyper_channels_out + (s + 1) * width, hidden, width)
                for s in range(num_slices)
            ]
            if lrp
            else None
        )

    def slice_params(self, hyper_features, decoded_slices, s):
        """(mu, sigma) for slice ``s`` given hyper features and slices < s."""
        if len(decoded_slices) != s:
            raise ValueError(
                f"slice {s} requested with {len(decoded_slices)} prior slices decoded"
            )
        width = self.ranges[s][1]
        inp = T.concat([hyper_features] + list(decoded_slices), axis=0) if decoded_slices else hyper_features
        out = self.param_nets[s](inp)
        mu = T.narrow(out, 0, 0, width)
        sraw = T.narrow(out, 0, width, width)
        sigma = T.clamp(T.exp(sraw), self.sigma_min, self.sigma_max)
        return mu, sigma

    def lrp_apply(self, y_hat_s, hyper_features, decoded_slices, s):
        """Quantization-error correction: y_hat + 0.5*tanh(r)."""
        if self.lrp_nets is None:
            return y_hat_s
        inp = T.concat([hyper_features] + list(decoded_slices) + [y_hat_s], axis=0)
        return y_hat_s + 0.5 * T.tanh(self.lrp_nets[s](inp))


# -- quantized CDF tables -------------------------------------------------------------


@dataclass
class CdfTable:
    """Cumulative frequencies at 16-bit precision over a bounded alphabet.

    ``cdf`` has n_symbols+1 entries: cdf[0] == 0, cdf[-1] == 65536,
    strictly increasing (every symbol keeps frequency >= 1).  Symbol
    index i codes integer value offset + i; the final index is the
    escape symbol.
    """

    offset: int
    cdf: np.ndarray

    @property
    def n_symbols(self):
        return len(self.cdf) - 1

    @property
    def escape_index(self):
        return self.n_symbols - 1


def pmf_to_quantized_cdf(pmf):
    """Deterministic largest-remainder quantization to a 16-bit CDF."""
    pmf = np.asarray(pmf, dtype=np.float64)
    n = pmf.size
    assert n + 1 <= CDF_TOTAL, "alphabet too large for CDF precision"
    pmf = np.maximum(pmf, 0.0)
    total_mass = pmf.sum()
    pmf = pmf / total_mass if total_mass > 0 else np.full(n, 1.0 / n)
    scaled = pmf * (CDF_TOTAL - n)
    base = np.floor(scaled).astype(np.int64)
    freq = base + 1  # every symbol stays codable
    rem = CDF_TOTAL - int(freq.sum())
    if rem > 0:
        order = np.argsort(-(scaled - base), kind="stable")
        freq[order[:rem]] += 1
    cdf = np.zeros(n + 1, dtype=np.uint32)
    np.cumsum(freq, out=cdf[1:])
    return cdf


def _finish_table(pmf_core):
    escape = max(1.0 - float(pmf_core.sum()), 0.0)
    pmf = np.append(pmf_core, escape)
    return CdfTable(-SYMBOL_BOUND, pmf_to_quantized_cdf(pmf))


def sigma_grid(levels=GRID_LEVELS, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    return np.exp(np.linspace(np.log(sigma_min), np.log(sigma_max), levels))


_TABLE_CACHE = {}


def gaussian_cdf_tables(levels=GRID_LEVELS, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    """Fixed tables, one per sigma level, over mean-centered symbols."""
    key = (levels, sigma_min, sigma_max)
    cached = _TABLE_CACHE.get(key)
    if cached is not None:
        return cached
    sigmas = sigma_grid(levels, sigma_min, sigma_max)
    ks = np.arange(-SYMBOL_BOUND, SYMBOL_BOUND + 1, dtype=np.float64)
    tables = []
    for s in sigmas:
        pmf = 0.5 * (
            _special.erf((ks + 0.5) / s * _INV_SQRT2)
            - _special.erf((ks - 0.5) / s * _INV_SQRT2)
        )
        tables.append(_finish_table(pmf))
    result = (sigmas, tables)
    _TABLE_CACHE[key] = result
    return result


def sigma_to_index(sigma, levels=GRID_LEVELS, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX):
    """Nearest grid level in log-space; identical on encode and decode."""
    sig = np.clip(np.asarray(sigma, dtype=np.float64), sigma_min, sigma_max)
    pos = (np.log(sig) - np.log(sigma_min)) / (np.log(sigma_max) - np.log(sigma_min))
    return np.clip(np.rint(pos * (levels - 1)).astype(np.int64), 0, levels - 1)
