"""Group-wise affine round-to-nearest weight quantization.

Scales and zero-points are computed per (row, group) over the input
dimension; codes are bit-packed little-endian, LSB-first within each byte,
with every row padded to a whole number of bytes. The round-trip guarantee
|w - dequant(quant(w))| <= s/2 (s = the entry's group scale) is what the
feedback reconstruction bound in fbcore is built on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .linalg import as_matrix, require_finite

__all__ = [
    "QuantConfig",
    "QuantizedTensor",
    "quantize_rtn",
    "dequantize",
    "pack_codes",
    "unpack_codes",
    "round_half_away",
]

SUPPORTED_BITS = (2, 3, 4, 8)


@dataclass(frozen=True)
class QuantConfig:
    bits: int
    group_size: int = 128
    scheme: str = "asymmetric-minmax"
    rounding: str = "half-away-from-zero"

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.scheme != "asymmetric-minmax":
            raise ValueError(f"unsupported scheme {self.scheme!r}")
        if self.rounding != "half-away-from-zero":
            raise ValueError(f"unsupported rounding {self.rounding!r}")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def num_groups(self, in_dim: int) -> int:
        return -(-in_dim // self.group_size)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "group_size": self.group_size,
            "scheme": self.scheme,
            "rounding": self.rounding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        return cls(**d)


@dataclass
class QuantizedTensor:
    """Packed integer weights with per-(row, group) scales and zero-points.

    `codes` is the packed byte matrix (rows x row_bytes); `scales` carries the
    compute precision of the source weights (float64 on the optimization
    path, float32 in deployment containers and the runtime).
    """

    shape: tuple[int, int]
    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    config: QuantConfig

    def __post_init__(self):
        out_dim, in_dim = self.shape
        n_groups = self.config.num_groups(in_dim)
        if self.codes.shape != (out_dim, _row_bytes(in_dim, self.config.bits)):
            raise ShapeError(f"packed codes shape {self.codes.shape} inconsistent with {self.shape}")
        if self.scales.shape != (out_dim, n_groups) or self.zero_points.shape != (out_dim, n_groups):
            raise ShapeError("scales/zero_points shape inconsistent with weight shape")

    @property
    def n_groups(self) -> int:
        return self.config.num_groups(self.shape[1])

    def unpacked(self) -> np.ndarray:
        """Codes as an int32 matrix of the original (out_dim, in_dim) shape."""
        return unpack_codes(self.codes, self.config.bits, self.shape[1])

    def astype(self, dtype) -> "QuantizedTensor":
        """Same codes with scales cast to `dtype` (the deployment cast)."""
        return QuantizedTensor(
            self.shape,
            self.codes,
            self.scales.astype(dtype),
            self.zero_points,
            self.config,
        )


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (np.round ties to even).

    floor(|x| + 0.5) would double-round: the addition itself can round up for
    inputs one ulp below a tie. |x| - floor(|x|) is exact in f64, so the tie
    comparison is exact.
    """
    mag = np.abs(x)
    base = np.floor(mag)
    rounded = np.where(mag - base >= 0.5, base + 1.0, base)
    return np.sign(x) * rounded


def _row_bytes(in_dim: int, bits: int) -> int:
    return -(-in_dim * bits // 8)


def _expand_groups(per_group: np.ndarray, group_size: int, in_dim: int) -> np.ndarray:
    return np.repeat(per_group, group_size, axis=1)[:, :in_dim]


def _group_min_max(w: np.ndarray, group_size: int):
    out_dim, in_dim = w.shape
    n_groups = -(-in_dim // group_size)
    pad = n_groups * group_size - in_dim
    if pad:
        wmin = np.pad(w, ((0, 0), (0, pad)), constant_values=np.inf)
        wmax = np.pad(w, ((0, 0), (0, pad)), constant_values=-np.inf)
    else:
        wmin = wmax = w
    gmin = wmin.reshape(out_dim, n_groups, group_size).min(axis=2)
    gmax = wmax.reshape(out_dim, n_groups, group_size).max(axis=2)
    return gmin, gmax


def quantize_rtn(w, config: QuantConfig) -> QuantizedTensor:
    """Round-to-nearest group-wise quantization.

    Per (row, group): s = (max - min) / (2^bits - 1), z = round(-min / s),
    code = clamp(round(w / s) + z, 0, 2^bits - 1). Degenerate all-equal
    groups get s = 1 and z = round(-min) so the scale stays positive and the
    s/2 round-trip bound holds trivially. Scales are computed in float64 but
    stored (and used for the code computation) in the dtype of `w`, so the
    bound is exact against the stored scale.
    """
    w = as_matrix(w)
    require_finite(w, "weights")
    out_dim, in_dim = w.shape
    if in_dim == 0:
        raise ShapeError("cannot quantize a matrix with zero columns")
    w64 = w.astype(np.float64, copy=False)

    gmin, gmax = _group_min_max(w64, config.group_size)
    degenerate = gmax == gmin
    scales = np.where(degenerate, 1.0, (gmax - gmin) / config.levels)
    # Quantize against the scale exactly as stored, so the stored scale and
    # the codes agree bit-for-bit in either precision.
    scales = scales.astype(w.dtype).astype(np.float64)
    zeros_f = round_half_away(-gmin / scales)
    if np.abs(zeros_f).max(initial=0.0) >= 2**31:
        raise FormatError("zero-point exceeds int32 range; rescale the weights")
    zeros = zeros_f.astype(np.int64)

    z_e = _expand_groups(zeros, config.group_size, in_dim)
    s_e = _expand_groups(scales, config.group_size, in_dim)
    codes = round_half_away(w64 / s_e) + z_e
    np.clip(codes, 0, config.levels, out=codes)
    packed = pack_codes(codes.astype(np.uint8), config.bits)
    return QuantizedTensor(
        (out_dim, in_dim),
        packed,
        scales.astype(w.dtype),
        zeros.astype(np.int32),
        config,
    )


def dequantize(q: QuantizedTensor) -> np.ndarray:
    """Reconstruct w' = (code - z) * s; output dtype follows q.scales."""
    out_dim, in_dim = q.shape
    codes = unpack_codes(q.codes, q.config.bits, in_dim)
    diff = codes - _expand_groups(q.zero_points.astype(np.int64), q.config.group_size, in_dim)
    s_e = _expand_groups(q.scales, q.config.group_size, in_dim)
    return (diff.astype(q.scales.dtype) * s_e).astype(q.scales.dtype)


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Bit-pack a (rows, cols) code matrix into (rows, ceil(cols*bits/8)) bytes.

    Codes are laid out consecutively LSB-first; rows are padded to byte
    boundaries with zero bits.
    """
    codes = np.ascontiguousarray(codes)
    if codes.ndim != 2:
        raise ShapeError("codes must be 2-D")
    if not (2 <= bits <= 8):
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << bits)):
        raise ValueError(f"code out of range for {bits}-bit packing")
    rows, cols = codes.shape
    row_bytes = _row_bytes(cols, bits)
    bit_planes = (codes[:, :, None].astype(np.uint8) >> np.arange(bits, dtype=np.uint8)) & 1
    stream = bit_planes.reshape(rows, cols * bits)
    pad = row_bytes * 8 - cols * bits
    if pad:
        stream = np.pad(stream, ((0, 0), (0, pad)))
    return np.packbits(stream.astype(np.uint8), axis=1, bitorder="little")


def unpack_codes(packed: np.ndarray, bits: int, cols: int) -> np.ndarray:
    """Inverse of pack_codes; validates that row padding bits are zero."""
    packed = np.ascontiguousarray(packed, dtype=np.uint8)
    if packed.ndim != 2:
        raise ShapeError("packed codes must be 2-D")
    rows, row_bytes = packed.shape
    if row_bytes != _row_bytes(cols, bits):
        raise FormatError(f"packed row stride {row_bytes} does not match {cols} {bits}-bit codes")
    stream = np.unpackbits(packed, axis=1, bitorder="little")
    used = cols * bits
    if used < stream.shape[1] and stream[:, used:].any():
        raise FormatError("corrupted packed payload: nonzero padding bits")
    weights = (1 << np.arange(bits, dtype=np.int32))
    return stream[:, :used].reshape(rows, cols, bits).astype(np.int32) @ weights
