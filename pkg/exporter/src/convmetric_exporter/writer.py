"""PAMW container writer.

Implements the documented binary layout independently of the consumer:
little-endian, magic "PAMW", version u32, layer count u32; per layer seven
u32 fields (in_channels, out_channels, kernel_size, stride, padding,
activation code, pool code) followed by the float64 row-major kernel array
and the float64 calibration vector; trailing CRC32 over everything before it.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"PAMW"
VERSION = 1
ACTIVATION_CODES = {"relu": 0}
POOL_CODES = {"none": 0, "avg2": 1}


class ExportError(ValueError):
    """Source model cannot be expressed in the PAMW layer vocabulary."""


@dataclass
class ExportedLayer:
    kernel: np.ndarray  # (out, in, k, k) float64
    calib: np.ndarray  # (out,) float64, non-negative
    stride: int
    padding: int
    pool: str  # "none" | "avg2"
    activation: str = "relu"

    def validate(self, expected_in: int | None) -> int:
        out_ch, in_ch, kh, kw = self.kernel.shape
        if kh != kw:
            raise ExportError(f"non-square kernel {kh}x{kw}")
        if expected_in is not None and in_ch != expected_in:
            raise ExportError(f"channel chain breaks: expected {expected_in} in, got {in_ch}")
        if self.calib.shape != (out_ch,):
            raise ExportError(f"calib shape {self.calib.shape} != ({out_ch},)")
        if np.any(self.calib < 0):
            raise ExportError("negative calibration weight")
        if self.activation not in ACTIVATION_CODES:
            raise ExportError(f"unsupported activation {self.activation!r}")
        if self.pool not in POOL_CODES:
            raise ExportError(f"unsupported pool {self.pool!r}")
        return out_ch


def write_pamw(layers: list[ExportedLayer], path) -> int:
    """Serialize layers; returns the CRC32 recorded in the trailer."""
    if not layers:
        raise ExportError("no layers to write")
    expected_in = None
    for layer in layers:
        expected_in = layer.validate(expected_in)

    parts = [MAGIC, struct.pack("<II", VERSION, len(layers))]
    for layer in layers:
        out_ch, in_ch, ksize, _ = layer.kernel.shape
        parts.append(
            struct.pack(
                "<7I", in_ch, out_ch, ksize, layer.stride, layer.padding,
                ACTIVATION_CODES[layer.activation], POOL_CODES[layer.pool],
            )
        )
        parts.append(np.ascontiguousarray(layer.kernel, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.calib, dtype="<f8").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    return crc
