"""Bitstream container: self-describing header + length-prefixed segments.

Little-endian layout (byte offsets in order):

    magic           4s   b"WBS1"
    version         u8
    model_id        8s   sha256(config text)[:8]
    arch            u8   0 = cnn, 1 = stf
    metric          u8   0 = mse, 1 = ms_ssim
    lambda_index    u8   index into the published lambda grid, 0xFF = custom
    lambda_value    f32
    true_h, true_w  u32, u32
    padded_h/w      u32, u32
    grid_version    u8   sigma-grid spec version (CDF tables are rebuilt)
    num_segments    u8   1 (hyper-latent) + S (latent slices)
    seg_lengths     u32 * num_segments
    segments        raw bytes, concatenated

Decodable with only the checkpoint: the config text embedded there
pins slice counts and channel widths; the header pins geometry.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"WBS1"
VERSION = 1

_FIXED = struct.Struct("<4sB8sBBBfIIIIBB")


class BitstreamError(Exception):
    """Malformed, truncated, or incompatible bitstream."""


@dataclass
class BitstreamHeader:
    model_id: bytes
    arch: str
    metric: str
    lambda_index: int
    lambda_value: float
    true_h: int
    true_w: int
    padded_h: int
    padded_w: int
    grid_version: int

    @property
    def pixels(self):
        return self.true_h * self.true_w


_ARCH_CODES = {"cnn": 0, "stf": 1}
_METRIC_CODES = {"mse": 0, "ms_ssim": 1}


def write_bitstream(header, segments):
    buf = bytearray(
        _FIXED.pack(
            MAGIC,
            VERSION,
            header.model_id,
            _ARCH_CODES[header.arch],
            _METRIC_CODES[header.metric],
            header.lambda_index,
            header.lambda_value,
            header.true_h,
            header.true_w,
            header.padded_h,
            header.padded_w,
            header.grid_version,
            len(segments),
        )
    )
    for seg in segments:
        buf += struct.pack("<I", len(seg))
    for seg in segments:
        buf += seg
    return bytes(buf)


def read_bitstream(data):
    if len(data) < _FIXED.size:
        raise BitstreamError("truncated bitstream: header incomplete")
    (magic, version, model_id, arch, metric, lam_idx, lam_val,
     th, tw, ph, pw, grid_ver, nseg) = _FIXED.unpack_from(data, 0)
    if magic != MAGIC:
        raise BitstreamError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BitstreamError(f"unsupported bitstream version {version}")
    arch_names = {v: k for k, v in _ARCH_CODES.items()}
    metric_names = {v: k for k, v in _METRIC_CODES.items()}
    if arch not in arch_names or metric not in metric_names:
        raise BitstreamError("unknown arch/metric code")
    pos = _FIXED.size
    if len(data) < pos + 4 * nseg:
        raise BitstreamError("truncated bitstream: segment table incomplete")
    lengths = struct.unpack_from(f"<{nseg}I", data, pos)
    pos += 4 * nseg
    if len(data) != pos + sum(lengths):
        raise BitstreamError(
            f"truncated bitstream: expected {pos + sum(lengths)} bytes, got {len(data)}"
        )
    segments = []
    for n in lengths:
        segments.append(data[pos:pos + n])
        pos += n
    header = BitstreamHeader(
        model_id, arch_names[arch], metric_names[metric], lam_idx, lam_val,
        th, tw, ph, pw, grid_ver,
    )
    return header, segments


def header_overhead_bytes(num_segments):
    return _FIXED.size + 4 * num_segments
