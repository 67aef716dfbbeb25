"""Inference path: naive four-pass vs fused two-kernel reconstructed linear
layers, with byte-exact memory-traffic accounting and a microbenchmark.

The naive path launches four kernels (full dequantization to a temporary,
main matmul, down-projection, up-projection) and writes the output buffer
twice. The fused path launches two: the down-projection, then a single pass
that dequantizes codes on the fly, accumulates the main product, and folds
the up-projection into the same output tile before writing it once.

Counters are incremented by the code path as each kernel launches;
expected_traffic computes the same numbers independently from the closed-form
model so tests can assert byte equality. A compiled extension provides the
hot kernels when available, with a pure-numpy fallback selected at import.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from threading import Lock

import numpy as np

from .errors import ShapeError
from .fbcore import SubBranch
from .quantizer import QuantConfig, QuantizedTensor, quantize_rtn

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - build-environment dependent
    _compiled = None
from . import _kernels_py as _python

__all__ = [
    "TrafficCounter",
    "FusedLayer",
    "CostModelQuery",
    "BenchRow",
    "macs_overhead",
    "naive_forward",
    "fused_forward",
    "expected_traffic",
    "benchmark",
    "active_backend",
    "available_backends",
]

_BACKENDS = {"python": _python}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_DEFAULT = "compiled" if _compiled is not None else "python"


def active_backend() -> str:
    """Name of the backend used when none is requested explicitly."""
    return _DEFAULT


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def _resolve(backend: str | None):
    if backend is None:
        backend = _DEFAULT
    try:
        return _BACKENDS[backend]
    except KeyError:
        raise ValueError(f"unknown backend {backend!r}; available: {available_backends()}") from None


@dataclass
class TrafficCounter:
    """Monotone byte/kernel/MAC counters for one or more forward passes.

    Totals are updated under a lock so concurrent forwards sharing a counter
    sum to the same values as serial execution. Per-buffer breakdowns keep
    the output-buffer and temporary-weight traffic separately checkable.
    """

    bytes_read: int = 0
    bytes_written: int = 0
    kernels_launched: int = 0
    macs: int = 0
    reads_by_buffer: dict = field(default_factory=dict)
    writes_by_buffer: dict = field(default_factory=dict)
    _lock: Lock = field(default_factory=Lock, repr=False, compare=False)

    def reset(self):
        with self._lock:
            self.bytes_read = 0
            self.bytes_written = 0
            self.kernels_launched = 0
            self.macs = 0
            self.reads_by_buffer = {}
            self.writes_by_buffer = {}

    def record_kernel(self, reads: dict, writes: dict, macs: int = 0):
        with self._lock:
            self.kernels_launched += 1
            self.macs += macs
            for name, nbytes in reads.items():
                self.bytes_read += nbytes
                self.reads_by_buffer[name] = self.reads_by_buffer.get(name, 0) + nbytes
            for name, nbytes in writes.items():
                self.bytes_written += nbytes
                self.writes_by_buffer[name] = self.writes_by_buffer.get(name, 0) + nbytes

    def as_dict(self) -> dict:
        return {
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "kernels_launched": self.kernels_launched,
            "macs": self.macs,
            "reads_by_buffer": dict(self.reads_by_buffer),
            "writes_by_buffer": dict(self.writes_by_buffer),
        }


@dataclass(frozen=True)
class CostModelQuery:
    """Decode/prefill shape: batch, layer dimension, sub-branch rank."""

    b: int
    d: int
    r: int

    def __post_init__(self):
        if self.b < 0 or self.d < 0 or self.r < 0:
            raise ValueError("shape parameters must be non-negative")


def macs_overhead(q: CostModelQuery):
    """Multiply-accumulate counts of the main path and the sub-branch.

    Returns (m0, m1, ratio) with m0 = b*d*d, m1 = 2*b*r*d and
    ratio = m1/m0 = 2r/d.
    """
    if q.d == 0:
        raise ZeroDivisionError("layer dimension d must be positive")
    m0 = q.b * q.d * q.d
    m1 = 2 * q.b * q.r * q.d
    return m0, m1, (2.0 * q.r) / q.d


@dataclass
class FusedLayer:
    """Deployment-form layer: packed codes plus float32 sub-branch factors,
    with a reusable (batch, rank) workspace for the down-projection."""

    q: QuantizedTensor
    sub: SubBranch
    workspace: np.ndarray | None = None

    def __post_init__(self):
        out_dim, in_dim = self.q.shape
        if self.sub.out_dim != out_dim or self.sub.in_dim != in_dim:
            raise ShapeError(
                f"sub-branch ({self.sub.out_dim}, {self.sub.in_dim}) inconsistent with weights {self.q.shape}"
            )

    @classmethod
    def from_parts(cls, q: QuantizedTensor, sub: SubBranch) -> "FusedLayer":
        return cls(q.astype(np.float32), sub.astype(np.float32))

    def get_workspace(self, batch: int, dtype) -> np.ndarray:
        shape = (batch, self.sub.rank)
        if self.workspace is None or self.workspace.shape != shape or self.workspace.dtype != dtype:
            self.workspace = np.empty(shape, dtype=dtype)
        return self.workspace


def _prep(q: QuantizedTensor, sub: SubBranch, x: np.ndarray):
    x = np.ascontiguousarray(x)
    if x.ndim != 2:
        raise ShapeError("input activations must be 2-D (batch, in_dim)")
    dtype = x.dtype
    if dtype not in (np.float32, np.float64):
        raise ShapeError(f"unsupported activation dtype {dtype}")
    out_dim, in_dim = q.shape
    if x.shape[1] != in_dim:
        raise ShapeError(f"input dim {x.shape[1]} != layer in_dim {in_dim}")
    if sub.out_dim != out_dim or sub.in_dim != in_dim:
        raise ShapeError("sub-branch shape inconsistent with quantized weights")
    scales = np.ascontiguousarray(q.scales, dtype=dtype)
    zeros = np.ascontiguousarray(q.zero_points, dtype=np.int32)
    a = np.ascontiguousarray(sub.a, dtype=dtype)
    bmat = np.ascontiguousarray(sub.b, dtype=dtype)
    return x, dtype, scales, zeros, a, bmat


_NO_SHADOW = np.zeros((1, 1), dtype=np.uint32)


def naive_forward(
    q: QuantizedTensor,
    sub: SubBranch,
    x: np.ndarray,
    counter: TrafficCounter | None = None,
    threads: int = 1,
    backend: str | None = None,
    shadow: np.ndarray | None = None,
) -> np.ndarray:
    """Four separate passes: dequantize W' fully, y = x W'^T, t = x A^T,
    y += t B^T. The output buffer is written twice and a full-precision
    weight temporary is materialized, read back, and discarded."""
    kern = _resolve(backend)
    x, dtype, scales, zeros, a, bmat = _prep(q, sub, x)
    out_dim, in_dim = q.shape
    bsz = x.shape[0]
    rank = sub.rank
    itemsize = dtype.itemsize
    cfg = q.config

    w_prime = np.empty((out_dim, in_dim), dtype=dtype)
    kern.dequant_rows(q.codes, scales, zeros, cfg.bits, cfg.group_size, w_prime, threads)
    if counter is not None:
        counter.record_kernel(
            reads={"codes": q.codes.nbytes, "scales": scales.nbytes, "zeros": zeros.nbytes},
            writes={"w_prime": w_prime.nbytes},
        )

    y = np.empty((bsz, out_dim), dtype=dtype)
    kern.gemm_nt(x, w_prime, y, False, threads)
    if shadow is not None:
        shadow += 1
    if counter is not None:
        counter.record_kernel(
            reads={"x": x.nbytes, "w_prime": w_prime.nbytes},
            writes={"output": y.nbytes},
            macs=bsz * out_dim * in_dim,
        )

    t = np.empty((bsz, rank), dtype=dtype)
    kern.gemm_nt(x, a, t, False, threads)
    if counter is not None:
        counter.record_kernel(
            reads={"x": x.nbytes, "a": a.nbytes},
            writes={"t": t.nbytes},
            macs=bsz * rank * in_dim,
        )

    kern.gemm_nt(t, bmat, y, True, threads)
    if shadow is not None:
        shadow += 1
    if counter is not None:
        counter.record_kernel(
            reads={"t": t.nbytes, "b": bmat.nbytes, "output": y.nbytes},
            writes={"output": y.nbytes},
            macs=bsz * out_dim * rank,
        )
    return y


def fused_forward(
    layer: FusedLayer,
    x: np.ndarray,
    counter: TrafficCounter | None = None,
    threads: int = 1,
    backend: str | None = None,
    shadow: np.ndarray | None = None,
) -> np.ndarray:
    """Two kernels: t = x A^T, then one pass that dequantizes on the fly,
    accumulates the main product, and adds t B^T into the same output tile.
    No full-precision weight temporary; output written exactly once."""
    kern = _resolve(backend)
    q = layer.q
    x, dtype, scales, zeros, a, bmat = _prep(q, layer.sub, x)
    out_dim, in_dim = q.shape
    bsz = x.shape[0]
    rank = layer.sub.rank
    cfg = q.config

    t = layer.get_workspace(bsz, dtype)
    kern.gemm_nt(x, a, t, False, threads)
    if counter is not None:
        counter.record_kernel(
            reads={"x": x.nbytes, "a": a.nbytes},
            writes={"t": t.nbytes},
            macs=bsz * rank * in_dim,
        )

    y = np.empty((bsz, out_dim), dtype=dtype)
    use_shadow = shadow is not None
    kern.fused_rows(
        x, q.codes, scales, zeros, cfg.bits, cfg.group_size, t, bmat, y,
        shadow if use_shadow else _NO_SHADOW, use_shadow, threads,
    )
    if counter is not None:
        counter.record_kernel(
            reads={
                "x": x.nbytes,
                "codes": q.codes.nbytes,
                "scales": scales.nbytes,
                "zeros": zeros.nbytes,
                "t": t.nbytes,
                "b": bmat.nbytes,
            },
            writes={"output": y.nbytes},
            macs=bsz * out_dim * in_dim + bsz * out_dim * rank,
        )
    return y


def expected_traffic(
    variant: str,
    b: int,
    out_dim: int,
    in_dim: int,
    rank: int,
    bits: int,
    group_size: int,
    itemsize: int = 4,
) -> TrafficCounter:
    """Closed-form traffic model, independent of the forward code paths."""
    row_bytes = -(-in_dim * bits // 8)
    n_groups = -(-in_dim // group_size)
    codes = out_dim * row_bytes
    scales = out_dim * n_groups * itemsize
    zeros = out_dim * n_groups * 4
    x = b * in_dim * itemsize
    a = rank * in_dim * itemsize
    bm = out_dim * rank * itemsize
    t = b * rank * itemsize
    y = b * out_dim * itemsize
    w_prime = out_dim * in_dim * itemsize
    c = TrafficCounter()
    if variant == "naive":
        c.record_kernel({"codes": codes, "scales": scales, "zeros": zeros}, {"w_prime": w_prime})
        c.record_kernel({"x": x, "w_prime": w_prime}, {"output": y}, macs=b * out_dim * in_dim)
        c.record_kernel({"x": x, "a": a}, {"t": t}, macs=b * rank * in_dim)
        c.record_kernel({"t": t, "b": bm, "output": y}, {"output": y}, macs=b * out_dim * rank)
    elif variant == "fused":
        c.record_kernel({"x": x, "a": a}, {"t": t}, macs=b * rank * in_dim)
        c.record_kernel(
            {"x": x, "codes": codes, "scales": scales, "zeros": zeros, "t": t, "b": bm},
            {"output": y},
            macs=b * out_dim * in_dim + b * out_dim * rank,
        )
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return c


@dataclass
class BenchRow:
    variant: str
    backend: str
    threads: int
    b: int
    d: int
    r: int
    bits: int
    median_ns: int
    tokens_per_s: float
    counters: dict

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "backend": self.backend,
            "threads": self.threads,
            "b": self.b,
            "d": self.d,
            "r": self.r,
            "bits": self.bits,
            "median_ns": self.median_ns,
            "tokens_per_s": self.tokens_per_s,
            "counters": self.counters,
        }


def _bench_layer(d: int, r: int, bits: int, group_size: int, rng) -> FusedLayer:
    w = (rng.standard_normal((d, d)) * 0.05).astype(np.float32)
    q = quantize_rtn(w, QuantConfig(bits=bits, group_size=min(group_size, d)))
    a = (rng.standard_normal((r, d)) * 0.01).astype(np.float32)
    bmat = (rng.standard_normal((d, r)) * 0.01).astype(np.float32)
    return FusedLayer(q, SubBranch(a, bmat))


def benchmark(
    shapes,
    reps: int,
    bits: int = 4,
    group_size: int = 128,
    seed: int = 0,
    threads=(1,),
    backends=None,
) -> list[BenchRow]:
    """Time naive vs fused forwards over the given shapes.

    One warmup run per variant is excluded; medians are over `reps` timed
    runs with deterministic inputs from `seed`. Counter snapshots come from a
    single counted forward. Runs every requested thread count and backend
    (default: the active one).
    """
    if reps < 3:
        raise ValueError("reps must be >= 3")
    if backends is None:
        backends = (active_backend(),)
    rows = []
    for shape in shapes:
        rng = np.random.default_rng([seed, shape.b, shape.d, shape.r])
        layer = _bench_layer(shape.d, shape.r, bits, group_size, rng)
        x = rng.standard_normal((shape.b, shape.d)).astype(np.float32)
        for backend in backends:
            for nthreads in threads:
                for variant in ("naive", "fused"):
                    if variant == "naive":
                        run = lambda c=None: naive_forward(
                            layer.q, layer.sub, x, counter=c, threads=nthreads, backend=backend
                        )
                    else:
                        run = lambda c=None: fused_forward(
                            layer, x, counter=c, threads=nthreads, backend=backend
                        )
                    counter = TrafficCounter()
                    run(counter)  # warmup + counter snapshot
                    samples = []
                    for _ in range(reps):
                        t0 = time.perf_counter_ns()
                        run()
                        samples.append(time.perf_counter_ns() - t0)
                    median_ns = int(np.median(samples))
                    rows.append(
                        BenchRow(
                            variant=variant,
                            backend=backend,
                            threads=nthreads,
                            b=shape.b,
                            d=shape.d,
                            r=shape.r,
                            bits=bits,
                            median_ns=median_ns,
                            tokens_per_s=shape.b * 1e9 / max(median_ns, 1),
                            counters=counter.as_dict(),
                        )
                    )
    return rows
