"""Dense float32 arithmetic and the ``FCTR`` binary trace format.

Tensors are plain ``numpy.ndarray`` objects. Reductions that feed traces use a
fixed, sequential accumulation order so that repeated runs are bit-identical.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"FCTR"
VERSION = 1

FLAG_CLS = 1
FLAG_QKV = 2
FLAG_ATTENTION = 4

_HEADER_FIELDS = (
    "version",
    "num_layers",
    "num_heads",
    "num_tokens",
    "head_dim",
    "value_dim",
    "flags",
    "grid_rows",
    "grid_cols",
)
_HEADER = struct.Struct("<" + "I" * len(_HEADER_FIELDS))

ROW_SUM_TOL = 1e-4


class ShapeError(ValueError):
    pass


class TraceError(ValueError):
    """Base class for trace reading/validation failures. ``code`` is stable."""

    code = "invalid_trace"


class BadMagicError(TraceError):
    code = "bad_magic"


class UnsupportedVersionError(TraceError):
    code = "unsupported_version"


class TruncatedPayloadError(TraceError):
    code = "truncated_payload"


class NonFiniteError(TraceError):
    code = "non_finite"


class InvalidTraceError(TraceError):
    code = "invalid_trace"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched ``a @ b`` accumulated in float64, one inner index at a time.

    BLAS is free to reorder the inner sum; this is not, which keeps results
    reproducible across thread counts.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(out_shape, dtype=np.float64)
    for k in range(a.shape[-1]):
        out += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return out


def softmax_rows(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 2:
        raise ShapeError(f"softmax_rows expects rank 2, got shape {t.shape}")
    return _softmax_last(t)


def _softmax_last(t: np.ndarray) -> np.ndarray:
    z = t - t.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_from_qk(q: np.ndarray, k: np.ndarray, scale_dim: int) -> np.ndarray:
    """Per-head ``softmax(q k^T / sqrt(scale_dim))`` for ``[heads, N, d]`` inputs."""
    q = np.asarray(q)
    k = np.asarray(k)
    if q.ndim != 3 or q.shape != k.shape:
        raise ShapeError(f"q and k must be matching [heads, N, d]; got {q.shape} and {k.shape}")
    logits = matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(scale_dim)
    return _softmax_last(logits)


def average_heads(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"average_heads expects [heads, N, N], got {a.shape}")
    total = np.zeros(a.shape[1:], dtype=np.float64)
    for h in range(a.shape[0]):
        total += a[h]
    return total / a.shape[0]


def l1_norm_rows(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"l1_norm_rows expects rank 2, got {v.shape}")
    return np.abs(v).sum(axis=1)


def concat_heads(t: np.ndarray) -> np.ndarray:
    """``[heads, N, d]`` -> ``[N, heads * d]`` (head-major feature blocks)."""
    h, n, d = t.shape
    return np.ascontiguousarray(np.transpose(t, (1, 0, 2))).reshape(n, h * d)


@dataclass
class LayerTrace:
    q: Optional[np.ndarray] = None
    k: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    attn: Optional[np.ndarray] = None

    @property
    def has_qkv(self) -> bool:
        return self.q is not None

    @property
    def num_tokens(self) -> int:
        ref = self.attn if self.attn is not None else self.q
        return int(ref.shape[1])


@dataclass
class TraceFile:
    num_heads: int
    num_tokens: int
    head_dim: int
    value_dim: int
    grid_rows: int
    grid_cols: int
    has_cls: bool
    has_qkv: bool
    has_attention: bool
    layers: list = field(default_factory=list)
    version: int = VERSION

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def flags(self) -> int:
        return (
            (FLAG_CLS if self.has_cls else 0)
            | (FLAG_QKV if self.has_qkv else 0)
            | (FLAG_ATTENTION if self.has_attention else 0)
        )

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    def header(self) -> dict:
        return {name: int(getattr(self, name)) for name in _HEADER_FIELDS}

    def validate(self) -> None:
        if not (self.has_qkv or self.has_attention):
            raise InvalidTraceError("trace must carry QKV, attention, or both")
        expected = self.num_patches + (1 if self.has_cls else 0)
        if self.num_tokens != expected:
            raise InvalidTraceError(
                f"num_tokens={self.num_tokens} inconsistent with {self.grid_rows}x{self.grid_cols} grid"
                f" (has_cls={self.has_cls})"
            )
        h, n = self.num_heads, self.num_tokens
        for i, layer in enumerate(self.layers):
            for name, dim, present in (
                ("q", self.head_dim, self.has_qkv),
                ("k", self.head_dim, self.has_qkv),
                ("v", self.value_dim, self.has_qkv),
                ("attn", n, self.has_attention),
            ):
                t = getattr(layer, name)
                if not present:
                    if t is not None:
                        raise InvalidTraceError(f"layer {i}: unexpected tensor {name!r}")
                    continue
                if t is None or tuple(t.shape) != (h, n, dim):
                    got = None if t is None else tuple(t.shape)
                    raise InvalidTraceError(f"layer {i}: {name} has shape {got}, expected {(h, n, dim)}")
                if not np.all(np.isfinite(t)):
                    raise NonFiniteError(f"layer {i}: {name} contains NaN or Inf")
            if self.has_attention:
                a = layer.attn
                if np.any(a < 0):
                    raise InvalidTraceError(f"layer {i}: negative attention weight")
                if np.max(np.abs(a.astype(np.float64).sum(axis=-1) - 1.0)) > ROW_SUM_TOL:
                    raise InvalidTraceError(f"layer {i}: attention rows do not sum to 1")


def _layer_tensors(trace: TraceFile, layer: LayerTrace):
    if trace.has_qkv:
        yield layer.q
        yield layer.k
        yield layer.v
    if trace.has_attention:
        yield layer.attn


def write_trace(trace: TraceFile, path) -> None:
    trace.validate()
    chunks = [MAGIC, _HEADER.pack(*trace.header().values())]
    for layer in trace.layers:
        for t in _layer_tensors(trace, layer):
            chunks.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_trace(path) -> TraceFile:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 4 + _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    hdr = dict(zip(_HEADER_FIELDS, _HEADER.unpack_from(raw, 4)))
    if hdr["version"] != VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {hdr['version']}")
    flags = hdr["flags"]
    if flags & ~(FLAG_CLS | FLAG_QKV | FLAG_ATTENTION):
        raise InvalidTraceError(f"{path}: unknown flag bits {flags:#x}")
    trace = TraceFile(
        num_heads=hdr["num_heads"],
        num_tokens=hdr["num_tokens"],
        head_dim=hdr["head_dim"],
        value_dim=hdr["value_dim"],
        grid_rows=hdr["grid_rows"],
        grid_cols=hdr["grid_cols"],
        has_cls=bool(flags & FLAG_CLS),
        has_qkv=bool(flags & FLAG_QKV),
        has_attention=bool(flags & FLAG_ATTENTION),
        version=hdr["version"],
    )
    h, n = trace.num_heads, trace.num_tokens
    shapes = []
    if trace.has_qkv:
        shapes += [("q", (h, n, trace.head_dim)), ("k", (h, n, trace.head_dim)), ("v", (h, n, trace.value_dim))]
    if trace.has_attention:
        shapes.append(("attn", (h, n, n)))
    per_layer = sum(int(np.prod(s)) for _, s in shapes) * 4
    offset = 4 + _HEADER.size
    expected = offset + per_layer * hdr["num_layers"]
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: header claims {hdr['num_layers']} layers ({expected} bytes), file has {len(raw)}"
        )
    if len(raw) > expected:
        raise InvalidTraceError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    for _ in range(hdr["num_layers"]):
        layer = LayerTrace()
        for name, shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += count * 4
            setattr(layer, name, arr.astype(np.float32))
        trace.layers.append(layer)
    trace.validate()
    return trace
