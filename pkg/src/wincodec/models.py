"""The two analysis/synthesis transform pairs.

* CNN codec: 4 stride-2 conv stages with GDN (inverse GDN and transposed
  convs in the decoder), window-attention modules inserted at
  configurable stage boundaries, mirrored in the decoder.  The ablation
  switch swaps the WAMs for global-attention modules or removes them.
* STF codec: patch embedding, per-stage swin blocks with alternating
  W-MSA / SW-MSA, patch merging on the way down and patch splitting +
  de-embedding on the way up.  No convolutions anywhere on the main
  encode/decode path.

Both share one entropy model family via a latent of ``latent_channels``
and a hyper-latent of ``hyper_channels`` (4x further downsampled).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .attention import WAM, SwinBlock
from .layers import GDN, Conv2d, LayerNorm, Linear, Module, gelu
from .tensor import Tensor


@dataclass
class StfConfig:
    patch_size: int = 2
    window_size: int = 4
    embed_dim: int = 48
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    latent_channels: int = 320
    hyper_channels: int = 192
    num_slices: int = 4
    slice_hidden: int = 48
    lrp: bool = True

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.heads = tuple(self.heads)
        if len(self.heads) != len(self.depths):
            raise ValueError("heads and depths must have one entry per stage")
        for s, h in enumerate(self.heads):
            if (self.embed_dim * (2 ** s)) % h:
                raise ValueError(f"stage {s}: heads {h} do not divide {self.embed_dim * 2**s} channels")
        if self.latent_channels % self.num_slices:
            raise ValueError("num_slices must divide latent_channels")

    @property
    def stages(self):
        return len(self.depths)

    @property
    def total_downsample(self):
        return self.patch_size * (2 ** (self.stages - 1))

    @classmethod
    def desk(cls, **kw):
        base = dict(embed_dim=24, depths=(2, 2, 2, 2), heads=(3, 6, 12, 24),
                    latent_channels=64, hyper_channels=32)
        base.update(kw)
        return cls(**base)


@dataclass
class CnnConfig:
    stage_channels: int = 192
    latent_channels: int = 320
    hyper_channels: int = 192
    wam_positions: tuple = (2, 4)
    attention: str = "wam"  # wam | nlam | none
    window_size: int = 4
    num_slices: int = 4
    slice_hidden: int = 48
    lrp: bool = True

    def __post_init__(self):
        self.wam_positions = tuple(self.wam_positions)
        if self.attention not in ("wam", "nlam", "none"):
            raise ValueError(f"unknown attention mode {self.attention!r}")
        if any(p not in (1, 2, 3, 4) for p in self.wam_positions):
            raise ValueError("wam_positions must be stage indices in 1..4")
        if self.latent_channels % self.num_slices:
            raise ValueError("num_slices must divide latent_channels")

    @property
    def total_downsample(self):
        return 16

    @classmethod
    def desk(cls, **kw):
        base = dict(stage_channels=32, latent_channels=64, hyper_channels=32)
        base.update(kw)
        return cls(**base)


# -- config <-> text (embedded in checkpoints, hashed into the bitstream) -------


def config_to_text(cfg):
    arch = "stf" if isinstance(cfg, StfConfig) else "cnn"
    lines = [f"arch={arch}"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    kv = {}
    for line in text.strip().splitlines():
        k, _, v = line.partition("=")
        kv[k] = v
    arch = kv.pop("arch")
    cls = StfConfig if arch == "stf" else CnnConfig
    kwargs = {}
    for f in fields(cls):
        raw = kv[f.name]
        if f.name in ("depths", "heads", "wam_positions"):
            kwargs[f.name] = tuple(int(x) for x in raw.split(",")) if raw else ()
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("bool", bool):
            kwargs[f.name] = raw == "True"
        else:
            kwargs[f.name] = raw
    return cls(**kwargs)


def model_id(cfg):
    """8-byte identity hash of the serialized config."""
    return hashlib.sha256(config_to_text(cfg).encode()).digest()[:8]


# -- token/map plumbing ----------------------------------------------------------


def to_tokens(x):
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)), (1, 0))


def to_map(tokens, h, w):
    n, c = tokens.shape
    return T.reshape(T.transpose(tokens, (1, 0)), (c, h, w))


def space_to_depth_tokens(x, n):
    """(C,H,W) -> ((H/n)*(W/n), n*n*C) tokens of concatenated n x n cells."""
    c, h, w = x.shape
    assert h % n == 0 and w % n == 0, "space_to_depth: dims must divide"
    t = T.reshape(x, (c, h // n, n, w // n, n))
    t = T.transpose(t, (1, 3, 2, 4, 0))  # (H/n, W/n, n, n, C)
    return T.reshape(t, ((h // n) * (w // n), n * n * c))


def depth_to_space_map(tokens, h, w, n, c):
    """Inverse of space_to_depth_tokens: tokens ((h*w), n*n*c) -> (c, h*n, w*n)."""
    t = T.reshape(tokens, (h, w, n, n, c))
    t = T.transpose(t, (4, 0, 2, 1, 3))  # (c, h, n, w, n)
    return T.reshape(t, (c, h * n, w * n))


_REPLICATE_CACHE = {}


def replicate_pad2d(x, bottom, right):
    """Edge-replicate pad on the bottom/right of (C,H,W)."""
    if bottom == 0 and right == 0:
        return x
    c, h, w = x.shape
    key = (c, h, w, bottom, right)
    idx = _REPLICATE_CACHE.get(key)
    if idx is None:
        rows = np.minimum(np.arange(h + bottom), h - 1)
        cols = np.minimum(np.arange(w + right), w - 1)
        ci = np.arange(c)[:, None, None]
        idx = ci * (h * w) + rows[None, :, None] * w + cols[None, None, :]
        _REPLICATE_CACHE[key] = idx
    return T.take(x, idx)


# -- STF -------------------------------------------------------------------------


class PatchEmbed(Module):
    """Linear embedding of non-overlapping N x N x 3 patches to C channels."""

    def __init__(self, rng, cfg):
        n = cfg.patch_size
        self.proj = Linear(rng, 3 * n * n, cfg.embed_dim)
        self.n = n

    def __call__(self, x):
        c, h, w = x.shape
        tokens = self.proj(space_to_depth_tokens(x, self.n))
        return to_map(tokens, h // self.n, w // self.n)


class PatchDeEmbed(Module):
    """Maps C-channel features back to 3 x (N*H) x (N*W) pixels."""

    def __init__(self, rng, cfg):
        n = cfg.patch_size
        self.proj = Linear(rng, cfg.embed_dim, 3 * n * n)
        self.n = n

    def __call__(self, x):
        c, h, w = x.shape
        tokens = self.proj(to_tokens(x))
        return depth_to_space_map(tokens, h, w, self.n, 3)


class PatchMerge(Module):
    """Concat 2x2 neighborhoods (4C) -> LN -> linear to 2C; halves resolution."""

    def __init__(self, rng, channels):
        self.norm = LayerNorm(4 * channels)
        self.reduce = Linear(rng, 4 * channels, 2 * channels, bias=False)

    def __call__(self, x):
        c, h, w = x.shape
        tokens = space_to_depth_tokens(x, 2)  # (h/2*w/2, 4C)
        tokens = self.reduce(self.norm(tokens))
        return to_map(tokens, h // 2, w // 2)


class PatchSplit(Module):
    """Linear 2C -> 4C -> LN -> rearrange into a 2x2 block of C; doubles resolution."""

    def __init__(self, rng, channels):
        # channels = input channel count (2C); output has channels // 2
        self.expand = Linear(rng, channels, 2 * channels, bias=False)
        self.norm = LayerNorm(2 * channels)

    def __call__(self, x):
        c, h, w = x.shape
        tokens = self.norm(self.expand(to_tokens(x)))  # (h*w, 2c) == 4 * (c/2)
        return depth_to_space_map(tokens, h, w, 2, c // 2)


class StfCodec(Module):
    """Symmetrical transformer codec (conv-free main path)."""

    def __init__(self, rng, cfg: StfConfig):
        self.cfg = cfg
        c, m = cfg.embed_dim, cfg.window_size
        self.embed = PatchEmbed(rng, cfg)
        self.enc_stages = []
        self.enc_merges = []
        for s, depth in enumerate(cfg.depths):
            ch = c * (2 ** s)
            self.enc_stages.append([
                SwinBlock(rng, ch, cfg.heads[s], m, shift=0 if b % 2 == 0 else m // 2)
                for b in range(depth)
            ])
            if s < cfg.stages - 1:
                self.enc_merges.append(PatchMerge(rng, ch))
        top = c * (2 ** (cfg.stages - 1))
        self.enc_head = Linear(rng, top, cfg.latent_channels)
        self.dec_head = Linear(rng, cfg.latent_channels, top)
        self.dec_stages = []
        self.dec_splits = []
        for s in reversed(range(cfg.stages)):
            ch = c * (2 ** s)
            self.dec_stages.append([
                SwinBlock(rng, ch, cfg.heads[s], m, shift=0 if b % 2 == 0 else m // 2)
                for b in range(cfg.depths[s])
            ])
            if s > 0:
                self.dec_splits.append(PatchSplit(rng, ch))
        self.de_embed = PatchDeEmbed(rng, cfg)
        self._init_hyper(rng, cfg)

    def _init_hyper(self, rng, cfg):
        cy, cz = cfg.latent_channels, cfg.hyper_channels
        self.hyper_out_channels = 2 * cy
        self.h_a1 = Linear(rng, 4 * cy, cz)
        self.h_a2 = Linear(rng, 4 * cz, cz)
        self.h_s1 = Linear(rng, cz, 4 * cz)
        self.h_s2 = Linear(rng, cz, 4 * self.hyper_out_channels)

    # main path ------------------------------------------------------------

    def encode(self, x):
        c, h, w = x.shape
        d = self.cfg.total_downsample
        if h % d or w % d:
            raise ValueError(f"input dims must be multiples of {d}, got {h}x{w}")
        if h < d or w < d:
            raise ValueError("image smaller than one patch pyramid")
        t = self.embed(x)
        for s, blocks in enumerate(self.enc_stages):
            for blk in blocks:
                t = blk(t)
            if s < len(self.enc_merges):
                t = self.enc_merges[s](t)
        ch, hh, ww = t.shape
        return to_map(self.enc_head(to_tokens(t)), hh, ww)

    def decode_raw(self, y_hat):
        cy, hh, ww = y_hat.shape
        t = to_map(self.dec_head(to_tokens(y_hat)), hh, ww)
        for i, blocks in enumerate(self.dec_stages):
            for blk in blocks:
                t = blk(t)
            if i < len(self.dec_splits):
                t = self.dec_splits[i](t)
        return self.de_embed(t)

    def decode(self, y_hat):
        return T.clamp(self.decode_raw(y_hat), 0.0, 1.0)

    # hyper path (linear stack; 4x further downsampling) ---------------------

    def hyper_encode(self, y):
        c, h, w = y.shape
        t = gelu(self.h_a1(space_to_depth_tokens(y, 2)))
        t = to_map(t, h // 2, w // 2)
        t = self.h_a2(space_to_depth_tokens(t, 2))
        return to_map(t, h // 4, w // 4)

    def hyper_decode(self, z_hat):
        c, h, w = z_hat.shape
        t = gelu(depth_to_space_map(self.h_s1(to_tokens(z_hat)), h, w, 2, self.cfg.hyper_channels))
        ch, hh, ww = t.shape
        t = depth_to_space_map(self.h_s2(to_tokens(t)), hh, ww, 2, self.hyper_out_channels)
        return t


# -- CNN -------------------------------------------------------------------------


class CnnCodec(Module):
    """Minnen-style 4-stage conv codec with GDN and optional attention modules."""

    def __init__(self, rng, cfg: CnnConfig):
        self.cfg = cfg
        n, cy = cfg.stage_channels, cfg.latent_channels
        mode = {"wam": "window", "nlam": "global"}.get(cfg.attention)
        self.enc_convs = [
            Conv2d(rng, 3, n, 5, stride=2),
            Conv2d(rng, n, n, 5, stride=2),
            Conv2d(rng, n, n, 5, stride=2),
            Conv2d(rng, n, cy, 5, stride=2),
        ]
        self.enc_gdns = [GDN(n), GDN(n), GDN(n)]
        self.dec_convs = [
            Conv2d(rng, cy, n, 5, stride=2, transposed=True, output_padding=1),
            Conv2d(rng, n, n, 5, stride=2, transposed=True, output_padding=1),
            Conv2d(rng, n, n, 5, stride=2, transposed=True, output_padding=1),
            Conv2d(rng, n, 3, 5, stride=2, transposed=True, output_padding=1),
        ]
        self.dec_gdns = [GDN(n, inverse=True), GDN(n, inverse=True), GDN(n, inverse=True)]
        self.enc_wams = {}
        self.dec_wams = {}
        if mode is not None:
            stage_ch = {1: n, 2: n, 3: n, 4: cy}
            wams_e, wams_d = [], []
            for pos in cfg.wam_positions:
                wams_e.append(WAM(rng, stage_ch[pos], cfg.window_size, mode=mode))
                wams_d.append(WAM(rng, stage_ch[pos], cfg.window_size, mode=mode))
            self.enc_wam_list = wams_e
            self.dec_wam_list = wams_d
            self.enc_wams = dict(zip(cfg.wam_positions, wams_e))
            self.dec_wams = dict(zip(cfg.wam_positions, wams_d))
        self._init_hyper(rng, cfg)

    def _init_hyper(self, rng, cfg):
        cy, cz = cfg.latent_channels, cfg.hyper_channels
        self.hyper_out_channels = 2 * cy
        self.h_a = [
            Conv2d(rng, cy, cz, 3, stride=1),
            Conv2d(rng, cz, cz, 5, stride=2),
            Conv2d(rng, cz, cz, 5, stride=2),
        ]
        self.h_s = [
            Conv2d(rng, cz, cz, 5, stride=2, transposed=True, output_padding=1),
            Conv2d(rng, cz, cz, 5, stride=2, transposed=True, output_padding=1),
            Conv2d(rng, cz, self.hyper_out_channels, 3, stride=1),
        ]

    def encode(self, x):
        c, h, w = x.shape
        if h % 16 or w % 16:
            raise ValueError(f"input dims must be multiples of 16, got {h}x{w}")
        t = x
        for i, conv in enumerate(self.enc_convs):
            t = conv(t)
            if i < 3:
                t = self.enc_gdns[i](t)
            wam = self.enc_wams.get(i + 1)
            if wam is not None:
                t = wam(t)
        return t

    def decode_raw(self, y_hat):
        t = y_hat
        for i, conv in enumerate(self.dec_convs):
            wam = self.dec_wams.get(4 - i)
            if wam is not None:
                t = wam(t)
            t = conv(t)
            if i < 3:
                t = self.dec_gdns[i](t)
        return t

    def decode(self, y_hat):
        return T.clamp(self.decode_raw(y_hat), 0.0, 1.0)

    def hyper_encode(self, y):
        t = y
        for i, conv in enumerate(self.h_a):
            t = conv(t)
            if i < 2:
                t = T.relu(t)
        return t

    def hyper_decode(self, z_hat):
        t = z_hat
        for i, conv in enumerate(self.h_s):
            t = conv(t)
            if i < 2:
                t = T.relu(t)
        return t


def build_transforms(cfg, rng):
    if isinstance(cfg, StfConfig):
        return StfCodec(rng, cfg)
    return CnnCodec(rng, cfg)


def arch_name(cfg):
    return "stf" if isinstance(cfg, StfConfig) else "cnn"
