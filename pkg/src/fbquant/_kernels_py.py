"""Pure-numpy fallback for the compiled forward kernels.

Mirrors the surface of fbquant._kernels. The fused path processes one
quantization group at a time so the only full-precision weight scratch is a
single (rows, group_size) tile; it never materializes the whole dequantized
matrix. Results agree with the compiled kernels to accumulation-reorder
tolerance (numpy reduces through BLAS, the compiled core is strictly
sequential).
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"


def _unpack_cols(packed: np.ndarray, bits: int, start: int, stop: int) -> np.ndarray:
    """Unpack codes for columns [start, stop) from row-aligned packed bytes."""
    bit_lo = start * bits
    bit_hi = stop * bits
    byte_lo = bit_lo // 8
    byte_hi = -(-bit_hi // 8)
    chunk = np.unpackbits(packed[:, byte_lo:byte_hi], axis=1, bitorder="little")
    chunk = chunk[:, bit_lo - byte_lo * 8 : bit_hi - byte_lo * 8]
    weights = 1 << np.arange(bits, dtype=np.int32)
    return chunk.reshape(packed.shape[0], stop - start, bits).astype(np.int32) @ weights


def _dequant_tile(packed, scales, zeros, bits, grp, start, stop, dtype):
    codes = _unpack_cols(packed, bits, start, stop)
    diff = codes - zeros[:, grp : grp + 1]
    return diff.astype(dtype) * scales[:, grp : grp + 1]


def gemm_nt(x, m, y, accumulate, threads):
    """y = (y +) x @ m.T; threads is ignored (BLAS manages its own)."""
    prod = x @ m.T
    if accumulate:
        y += prod
    else:
        y[:] = prod


def dequant_rows(packed, scales, zeros, bits, group_size, out, threads):
    """Materialize the full dequantized weight matrix into `out`."""
    cols = out.shape[1]
    n_groups = -(-cols // group_size)
    for grp in range(n_groups):
        start = grp * group_size
        stop = min(cols, start + group_size)
        out[:, start:stop] = _dequant_tile(
            packed, scales, zeros, bits, grp, start, stop, out.dtype
        )


def fused_rows(x, packed, scales, zeros, bits, group_size, t, bmat, y, shadow, use_shadow, threads):
    """Single-pass main path: on-the-fly dequant, matmul, plus t @ bmat.T.

    Accumulates into a local buffer and stores each output element exactly
    once.
    """
    cols = x.shape[1]
    n_groups = -(-cols // group_size)
    acc = np.zeros_like(y)
    for grp in range(n_groups):
        start = grp * group_size
        stop = min(cols, start + group_size)
        tile = _dequant_tile(packed, scales, zeros, bits, grp, start, stop, y.dtype)
        acc += x[:, start:stop] @ tile.T
    if bmat.shape[1]:
        acc += t @ bmat.T
    y[:] = acc
    if use_shadow:
        shadow += 1
