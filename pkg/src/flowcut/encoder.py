"""Seeded ViT-style encoder used as a stand-in vision backbone.

Pre-norm blocks (LayerNorm without affine terms, biased projections, tanh
GELU MLP). All weights come from a single SplitMix64 stream in a fixed order,
so a given ``EncoderConfig`` always yields the same network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import LayerTrace, TraceFile, matmul

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
LN_EPS = 1e-5


def splitmix64(seed: int, count: int) -> list[int]:
    """Reference scalar SplitMix64; returns the first ``count`` outputs."""
    state = seed & _MASK64
    out = []
    for _ in range(count):
        state = (state + GOLDEN_GAMMA) & _MASK64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


class SplitMix64:
    """Counter-based vectorised SplitMix64 (output i only depends on seed + i)."""

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.position = 0

    def next_uint64(self, count: int) -> np.ndarray:
        steps = np.arange(self.position + 1, self.position + count + 1, dtype=np.uint64)
        self.position += count
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))

    def uniform(self, shape, low: float, high: float) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        u = (self.next_uint64(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return (low + (high - low) * u).reshape(shape)


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 12
    heads: int = 4
    model_dim: int = 64
    mlp_dim: int = 256
    grid_rows: int = 8
    grid_cols: int = 8
    has_cls: bool = True
    seed: int = 0
    # half-width of the uniform weight distribution
    weight_range: float = 0.05

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def num_tokens(self) -> int:
        return self.num_patches + (1 if self.has_cls else 0)

    def validate(self) -> None:
        for name in ("layers", "heads", "model_dim", "mlp_dim", "grid_rows", "grid_cols"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim={self.model_dim} not divisible by heads={self.heads}")
        if self.layers < 2:
            raise ValueError("need at least 2 layers so a penultimate layer exists")
        if not 0 <= self.seed <= _MASK64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.weight_range <= 0:
            raise ValueError("weight_range must be positive")


LAYER_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "w1", "b1", "w2", "b2")


def _param_shapes(cfg: EncoderConfig) -> dict:
    d, m = cfg.model_dim, cfg.mlp_dim
    return {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "w1": (d, m), "b1": (m,), "w2": (m, d), "b2": (d,),
    }


@dataclass
class EncoderState:
    cfg: EncoderConfig
    embed_w: np.ndarray
    embed_b: np.ndarray
    cls: np.ndarray
    blocks: list
    hidden: np.ndarray = None
    active: np.ndarray = None
    next_layer: int = 0


def build_encoder(cfg: EncoderConfig) -> EncoderState:
    cfg.validate()
    rng = SplitMix64(cfg.seed)
    r = cfg.weight_range
    d = cfg.model_dim
    embed_w = rng.uniform((d,), -r, r)
    embed_b = rng.uniform((d,), -r, r)
    cls = rng.uniform((d,), -r, r)
    shapes = _param_shapes(cfg)
    blocks = [{name: rng.uniform(shapes[name], -r, r) for name in LAYER_PARAMS} for _ in range(cfg.layers)]
    return EncoderState(cfg=cfg, embed_w=embed_w, embed_b=embed_b, cls=cls, blocks=blocks)


def sinusoidal_positions(count: int, dim: int) -> np.ndarray:
    pos = np.arange(count, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((count, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe


def synthetic_input(cfg: EncoderConfig, seed: int | None = None) -> np.ndarray:
    """Seeded pseudo-random 'image' in [-1, 1), one scalar per patch."""
    stream = SplitMix64((cfg.seed if seed is None else seed) ^ 0x5EED5EED5EED5EED)
    return stream.uniform((cfg.grid_rows, cfg.grid_cols), -1.0, 1.0)


def load_input(state: EncoderState, input_grid: np.ndarray) -> None:
    cfg = state.cfg
    grid = np.asarray(input_grid, dtype=np.float64)
    if grid.shape != (cfg.grid_rows, cfg.grid_cols):
        raise ValueError(f"input grid {grid.shape} does not match config {(cfg.grid_rows, cfg.grid_cols)}")
    patches = grid.reshape(-1, 1) * state.embed_w + state.embed_b
    patches = patches + sinusoidal_positions(cfg.num_patches, cfg.model_dim)
    if cfg.has_cls:
        patches = np.vstack([state.cls[None, :], patches])
    state.hidden = patches
    state.active = np.arange(cfg.num_tokens)
    state.next_layer = 0


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return np.transpose(x.reshape(n, heads, d // heads), (1, 0, 2))


def encode_step(state: EncoderState, layer_index: int) -> LayerTrace:
    """Run one block over the active tokens and return its trace."""
    cfg = state.cfg
    if state.hidden is None:
        raise RuntimeError("encoder has no input; call load_input first")
    if layer_index != state.next_layer:
        raise ValueError(f"expected layer {state.next_layer}, got {layer_index}")
    if layer_index >= cfg.layers:
        raise ValueError(f"encoder has only {cfg.layers} layers")
    p = state.blocks[layer_index]
    x = state.hidden
    hd = cfg.head_dim

    h = _layer_norm(x)
    q = _split_heads(matmul(h, p["wq"]) + p["bq"], cfg.heads)
    k = _split_heads(matmul(h, p["wk"]) + p["bk"], cfg.heads)
    v = _split_heads(matmul(h, p["wv"]) + p["bv"], cfg.heads)
    logits = matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(hd)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    attn = e / e.sum(axis=-1, keepdims=True)
    ctx = matmul(attn, v)
    ctx = np.transpose(ctx, (1, 0, 2)).reshape(x.shape[0], cfg.model_dim)
    x = x + matmul(ctx, p["wo"]) + p["bo"]

    h2 = _layer_norm(x)
    x = x + matmul(gelu(matmul(h2, p["w1"]) + p["b1"]), p["w2"]) + p["b2"]

    state.hidden = x
    state.next_layer += 1
    return LayerTrace(
        q=q.astype(np.float32),
        k=k.astype(np.float32),
        v=v.astype(np.float32),
        attn=attn.astype(np.float32),
    )


def encode(state: EncoderState, input_grid: np.ndarray) -> list[LayerTrace]:
    load_input(state, input_grid)
    return [encode_step(state, i) for i in range(state.cfg.layers)]


def drop_tokens(state: EncoderState, drop) -> None:
    """Remove the given original token indices from the active set."""
    drop = {int(i) for i in drop}
    if not drop:
        return
    active = [int(i) for i in state.active]
    unknown = drop.difference(active)
    if unknown:
        raise ValueError(f"cannot drop unknown/inactive tokens {sorted(unknown)}")
    if state.cfg.has_cls and 0 in drop and state.next_layer < state.cfg.layers:
        raise ValueError("cannot drop the CLS token while layers remain")
    keep = np.array([i not in drop for i in active])
    state.hidden = state.hidden[keep]
    state.active = state.active[keep]


def to_trace_file(cfg: EncoderConfig, layers: list[LayerTrace], qkv: bool = True, attention: bool = True) -> TraceFile:
    if not (qkv or attention):
        raise ValueError("a trace needs QKV, attention, or both")
    kept = [
        LayerTrace(
            q=l.q if qkv else None,
            k=l.k if qkv else None,
            v=l.v if qkv else None,
            attn=l.attn if attention else None,
        )
        for l in layers
    ]
    trace = TraceFile(
        num_heads=cfg.heads,
        num_tokens=cfg.num_tokens,
        head_dim=cfg.head_dim,
        value_dim=cfg.head_dim,
        grid_rows=cfg.grid_rows,
        grid_cols=cfg.grid_cols,
        has_cls=cfg.has_cls,
        has_qkv=qkv,
        has_attention=attention,
        layers=kept,
    )
    trace.validate()
    return trace


def generate_trace(cfg: EncoderConfig, input_grid: np.ndarray | None = None) -> TraceFile:
    state = build_encoder(cfg)
    grid = synthetic_input(cfg) if input_grid is None else input_grid
    return to_trace_file(cfg, encode(state, grid))
