"""File formats: safetensors calibration bundles, the FBQ1 checkpoint
container, JSON reports, and SVG chart emission.

Bundles use the safetensors layout (8-byte little-endian header length, JSON
header with dtype/shape/offsets, raw row-major payload) with tensors named
"<layer>.weight" and "<layer>.calib_x". Quantized checkpoints use the custom
FBQ1 container because safetensors cannot express sub-byte packed codes.
All writers are deterministic: identical inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import NamedTuple

import numpy as np

from .errors import DataError, FormatError, SchemaError
from .fbcore import LayerRecord, SubBranch
from .quantizer import QuantConfig, QuantizedTensor

__all__ = [
    "save_safetensors",
    "load_safetensors",
    "save_bundle",
    "load_bundle",
    "FbqLayer",
    "save_fbq",
    "load_fbq",
    "write_json",
    "render_line_chart",
]

FBQ_MAGIC = b"FBQ1"
FBQ_VERSION = 1

_ST_DTYPES = {"F16": np.float16, "F32": np.float32, "F64": np.float64}
_ST_NAMES = {np.dtype(np.float16): "F16", np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}


# ---------------------------------------------------------------------------
# safetensors
# ---------------------------------------------------------------------------

def save_safetensors(path, tensors: dict[str, np.ndarray], metadata: dict | None = None):
    """Write tensors in the safetensors container layout, in dict order."""
    header: dict = {}
    if metadata:
        header["__metadata__"] = {str(k): str(v) for k, v in metadata.items()}
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype not in _ST_NAMES:
            raise FormatError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        header[name] = {
            "dtype": _ST_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_safetensors(path) -> dict[str, np.ndarray]:
    """Read a safetensors file; tensors come back in header order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated before header length (byte 0)")
    (header_len,) = struct.unpack("<Q", data[:8])
    if 8 + header_len > len(data):
        raise FormatError(f"{path}: header length {header_len} overruns file (byte 8)")
    try:
        header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        offset = 8 + getattr(exc, "pos", 0)
        raise FormatError(f"{path}: malformed header JSON (byte {offset}): {exc}") from exc
    payload = data[8 + header_len :]
    out: dict[str, np.ndarray] = {}
    for name, info in header.items():
        if name == "__metadata__":
            continue
        try:
            dtype = _ST_DTYPES[info["dtype"]]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = info["data_offsets"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed tensor entry {name!r}: {exc}") from exc
        if not (0 <= begin <= end <= len(payload)):
            raise FormatError(f"{path}: tensor {name!r} offsets [{begin}, {end}] overrun payload")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(payload[begin:end], dtype=np.dtype(dtype).newbyteorder("<"))
        if arr.size != count:
            raise FormatError(f"{path}: tensor {name!r} payload size mismatch")
        out[name] = arr.astype(dtype).reshape(shape)
    return out


def save_bundle(path, layers: list[LayerRecord]):
    """Write layer weights and calibration inputs as a safetensors bundle."""
    tensors: dict[str, np.ndarray] = {}
    for layer in layers:
        tensors[f"{layer.name}.weight"] = layer.w
        tensors[f"{layer.name}.calib_x"] = layer.x
    save_safetensors(path, tensors)


def load_bundle(path) -> list[LayerRecord]:
    """Parse "<layer>.weight" / "<layer>.calib_x" pairs into LayerRecords.

    Layers come back in header order. A weight without its calibration
    tensor (or vice versa) is a SchemaError; non-finite payloads are a
    DataError.
    """
    tensors = load_safetensors(path)
    names: list[str] = []
    weights: dict[str, np.ndarray] = {}
    calibs: dict[str, np.ndarray] = {}
    for key, arr in tensors.items():
        if key.endswith(".weight"):
            name = key[: -len(".weight")]
            weights[name] = arr
            names.append(name)
        elif key.endswith(".calib_x"):
            calibs[key[: -len(".calib_x")]] = arr
        else:
            raise SchemaError(f"{path}: unexpected tensor {key!r} (want .weight/.calib_x)")
    records = []
    for name in names:
        if name not in calibs:
            raise SchemaError(f"{path}: layer {name!r} has weights but no calib_x")
        if not np.isfinite(weights[name]).all() or not np.isfinite(calibs[name]).all():
            raise DataError(f"{path}: layer {name!r} contains non-finite values")
        records.append(LayerRecord(name, weights[name].astype(np.float64), calibs[name].astype(np.float64)))
    extra = set(calibs) - set(weights)
    if extra:
        raise SchemaError(f"{path}: calib_x without weights for layer(s) {sorted(extra)}")
    return records


# ---------------------------------------------------------------------------
# FBQ1 quantized-checkpoint container
# ---------------------------------------------------------------------------

class FbqLayer(NamedTuple):
    name: str
    q: QuantizedTensor
    sub: SubBranch


_SEGMENT_ORDER = ("codes", "scales", "zeros", "a", "b")


def save_fbq(path, layers: list[tuple[str, QuantizedTensor, SubBranch]], qconfig: QuantConfig):
    """Write the FBQ1 container: magic, u64 header length, JSON header, then
    per-layer codes/scales/zeros/a/b buffers concatenated in header order.

    Scales and sub-branch factors are stored float32 little-endian,
    zero-points int32; codes keep their packed sub-byte layout.
    """
    entries = []
    payloads: list[bytes] = []
    offset = 0
    for name, q, sub in layers:
        segs = {}
        buffers = {
            "codes": np.ascontiguousarray(q.codes, dtype=np.uint8).tobytes(),
            "scales": q.scales.astype("<f4").tobytes(),
            "zeros": q.zero_points.astype("<i4").tobytes(),
            "a": np.ascontiguousarray(sub.a).astype("<f4").tobytes(),
            "b": np.ascontiguousarray(sub.b).astype("<f4").tobytes(),
        }
        for seg in _SEGMENT_ORDER:
            raw = buffers[seg]
            segs[seg] = [offset, len(raw)]
            payloads.append(raw)
            offset += len(raw)
        entries.append(
            {
                "name": name,
                "out_dim": q.shape[0],
                "in_dim": q.shape[1],
                "rank": sub.rank,
                "segments": segs,
            }
        )
    header = {"format_version": FBQ_VERSION, "qconfig": qconfig.to_dict(), "layers": entries}
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FBQ_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in payloads:
            fh.write(raw)


def load_fbq(path) -> tuple[QuantConfig, list[FbqLayer]]:
    """Read an FBQ1 container back, validating magic, version, and that the
    declared segments exactly tile the payload."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated container (byte 0)")
    if data[:4] != FBQ_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} (byte 0)")
    (header_len,) = struct.unpack("<Q", data[4:12])
    if 12 + header_len > len(data):
        raise FormatError(f"{path}: header length {header_len} overruns file (byte 4)")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed header JSON (byte {12 + getattr(exc, 'pos', 0)}): {exc}") from exc
    if header.get("format_version") != FBQ_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    qconfig = QuantConfig.from_dict(header["qconfig"])
    payload = data[12 + header_len :]

    cursor = 0
    layers: list[FbqLayer] = []
    for entry in header["layers"]:
        try:
            name = entry["name"]
            out_dim = int(entry["out_dim"])
            in_dim = int(entry["in_dim"])
            rank = int(entry["rank"])
            segs = entry["segments"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: malformed layer entry: {exc}") from exc
        raws = {}
        for seg in _SEGMENT_ORDER:
            try:
                off, length = segs[seg]
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}: layer {name!r} missing segment {seg!r}") from exc
            if off != cursor:
                raise FormatError(f"{path}: segment {name}/{seg} at {off} leaves a gap or overlap (expected {cursor})")
            if off + length > len(payload):
                raise FormatError(f"{path}: segment {name}/{seg} overruns payload")
            raws[seg] = payload[off : off + length]
            cursor = off + length
        n_groups = qconfig.num_groups(in_dim)
        row_bytes = -(-in_dim * qconfig.bits // 8)
        codes = np.frombuffer(raws["codes"], dtype=np.uint8)
        scales = np.frombuffer(raws["scales"], dtype="<f4")
        zeros = np.frombuffer(raws["zeros"], dtype="<i4")
        a = np.frombuffer(raws["a"], dtype="<f4")
        b = np.frombuffer(raws["b"], dtype="<f4")
        if codes.size != out_dim * row_bytes or scales.size != out_dim * n_groups:
            raise FormatError(f"{path}: layer {name!r} segment sizes inconsistent with dims")
        if zeros.size != out_dim * n_groups or a.size != rank * in_dim or b.size != out_dim * rank:
            raise FormatError(f"{path}: layer {name!r} segment sizes inconsistent with dims")
        q = QuantizedTensor(
            (out_dim, in_dim),
            codes.reshape(out_dim, row_bytes).copy(),
            scales.astype(np.float32).reshape(out_dim, n_groups),
            zeros.astype(np.int32).reshape(out_dim, n_groups),
            qconfig,
        )
        sub = SubBranch(
            a.astype(np.float32).reshape(rank, in_dim),
            b.astype(np.float32).reshape(out_dim, rank),
        )
        layers.append(FbqLayer(name, q, sub))
    if cursor != len(payload):
        raise FormatError(f"{path}: payload has {len(payload) - cursor} trailing bytes beyond declared segments")
    return qconfig, layers


# ---------------------------------------------------------------------------
# reports and charts
# ---------------------------------------------------------------------------

def write_json(path, obj: dict):
    """Deterministic JSON emission: stable key order as built, no timestamps."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_line_chart(series, title: str, xlabel: str, ylabel: str) -> str:
    """Minimal SVG line chart. `series` is a list of (label, xs, ys)."""
    width, height = 640, 400
    ml, mr, mt, mb = 60, 20, 40, 50
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if not xs_all:
        xs_all = ys_all = [0.0, 1.0]
    x_lo, x_hi = min(xs_all), max(xs_all)
    y_lo, y_hi = min(ys_all), max(ys_all)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0

    def sx(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def sy(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width // 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" y2="{height - mb}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="16" y="{height // 2}" font-size="12" transform="rotate(-90 16 {height // 2})" text-anchor="middle">{ylabel}</text>',
        f'<text x="{ml - 6}" y="{height - mb + 4}" text-anchor="end" font-size="10">{y_lo:.3g}</text>',
        f'<text x="{ml - 6}" y="{mt + 4}" text-anchor="end" font-size="10">{y_hi:.3g}</text>',
        f'<text x="{ml}" y="{height - mb + 16}" text-anchor="middle" font-size="10">{x_lo:.3g}</text>',
        f'<text x="{width - mr}" y="{height - mb + 16}" text-anchor="middle" font-size="10">{x_hi:.3g}</text>',
    ]
    for idx, (label, xs, ys) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(
            f'<text x="{width - mr - 4}" y="{mt + 14 * (idx + 1)}" text-anchor="end" font-size="11" fill="{color}">{label}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
