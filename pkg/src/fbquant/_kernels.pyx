"""Compiled forward kernels: dequantization, strict-order matmul, fused pass.

Every output element is accumulated sequentially in ascending input index,
in the element dtype, so results are bit-identical run to run and across
thread counts (parallelism is only across independent output elements).
"""

from cython.parallel cimport prange


ctypedef fused real:
    float
    double

BACKEND_NAME = "compiled"


cdef inline int _code_at(const unsigned char[:, ::1] packed, Py_ssize_t row,
                         Py_ssize_t col, int bits, Py_ssize_t row_bytes) noexcept nogil:
    cdef Py_ssize_t bit = col * bits
    cdef Py_ssize_t byte = bit >> 3
    cdef int shift = <int>(bit & 7)
    cdef unsigned int word = packed[row, byte]
    if byte + 1 < row_bytes:
        word = word | ((<unsigned int>packed[row, byte + 1]) << 8)
    return <int>((word >> shift) & ((1u << bits) - 1u))


def gemm_nt(real[:, ::1] x, real[:, ::1] m, real[:, ::1] y, bint accumulate, int threads):
    """y = (y +) x @ m.T with sequential accumulation over the inner index."""
    cdef Py_ssize_t bsz = x.shape[0]
    cdef Py_ssize_t kdim = x.shape[1]
    cdef Py_ssize_t out_dim = m.shape[0]
    cdef Py_ssize_t o, i, k
    cdef real acc
    for o in prange(out_dim, nogil=True, num_threads=threads, schedule="static"):
        for i in range(bsz):
            if accumulate:
                acc = y[i, o]
            else:
                acc = <real>0
            for k in range(kdim):
                acc = acc + x[i, k] * m[o, k]
            y[i, o] = acc


def dequant_rows(const unsigned char[:, ::1] packed, real[:, ::1] scales,
                 const int[:, ::1] zeros, int bits, Py_ssize_t group_size,
                 real[:, ::1] out, int threads):
    """Materialize the full dequantized weight matrix into `out`."""
    cdef Py_ssize_t rows = out.shape[0]
    cdef Py_ssize_t cols = out.shape[1]
    cdef Py_ssize_t row_bytes = packed.shape[1]
    cdef Py_ssize_t n_groups = scales.shape[1]
    cdef Py_ssize_t o, k, grp, stop
    cdef real s
    cdef int z
    for o in prange(rows, nogil=True, num_threads=threads, schedule="static"):
        for grp in range(n_groups):
            s = scales[o, grp]
            z = zeros[o, grp]
            stop = (grp + 1) * group_size
            if stop > cols:
                stop = cols
            for k in range(grp * group_size, stop):
                out[o, k] = (<real>(_code_at(packed, o, k, bits, row_bytes) - z)) * s


def fused_rows(real[:, ::1] x, const unsigned char[:, ::1] packed,
               real[:, ::1] scales, const int[:, ::1] zeros, int bits,
               Py_ssize_t group_size, real[:, ::1] t, real[:, ::1] bmat,
               real[:, ::1] y, unsigned int[:, ::1] shadow, bint use_shadow,
               int threads):
    """Single-pass main path: dequantize codes on the fly while accumulating
    x @ W'.T, then fold in the low-rank term t @ bmat.T, writing each output
    element exactly once. Scales/zero-points load once per group."""
    cdef Py_ssize_t bsz = x.shape[0]
    cdef Py_ssize_t cols = x.shape[1]
    cdef Py_ssize_t out_dim = y.shape[1]
    cdef Py_ssize_t rank = bmat.shape[1]
    cdef Py_ssize_t row_bytes = packed.shape[1]
    cdef Py_ssize_t n_groups = scales.shape[1]
    cdef Py_ssize_t o, i, k, j, grp, stop
    cdef real acc, s
    cdef int z
    for o in prange(out_dim, nogil=True, num_threads=threads, schedule="static"):
        for i in range(bsz):
            acc = <real>0
            for grp in range(n_groups):
                s = scales[o, grp]
                z = zeros[o, grp]
                stop = (grp + 1) * group_size
                if stop > cols:
                    stop = cols
                for k in range(grp * group_size, stop):
                    acc = acc + x[i, k] * ((<real>(_code_at(packed, o, k, bits, row_bytes) - z)) * s)
            for j in range(rank):
                acc = acc + t[i, j] * bmat[o, j]
            y[i, o] = acc
            if use_shadow:
                shadow[i, o] += 1
