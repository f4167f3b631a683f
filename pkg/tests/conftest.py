import numpy as np
import pytest

from flowcut.encoder import EncoderConfig, generate_trace
from flowcut.tensor import LayerTrace, TraceFile, attention_from_qk

ACCEPTANCE_LINES = []


def random_trace(rng, layers=4, heads=2, rows=3, cols=3, has_cls=True, dim=4, scale=None, attention=True, qkv=True):
    """Random but valid trace; ``scale`` controls how peaked attention is."""
    n = rows * cols + (1 if has_cls else 0)
    out = []
    for _ in range(layers):
        s = rng.uniform(0.1, 4.0) if scale is None else scale
        q = (rng.standard_normal((heads, n, dim)) * s).astype(np.float32)
        k = (rng.standard_normal((heads, n, dim)) * s).astype(np.float32)
        v = rng.standard_normal((heads, n, dim)).astype(np.float32)
        a = attention_from_qk(q, k, dim).astype(np.float32)
        out.append(
            LayerTrace(
                q=q if qkv else None,
                k=k if qkv else None,
                v=v if qkv else None,
                attn=a if attention else None,
            )
        )
    return TraceFile(
        num_heads=heads,
        num_tokens=n,
        head_dim=dim,
        value_dim=dim,
        grid_rows=rows,
        grid_cols=cols,
        has_cls=has_cls,
        has_qkv=qkv,
        has_attention=attention,
        layers=out,
    )


def identity_trace(rows=3, cols=3, layers=2, has_cls=True):
    n = rows * cols + (1 if has_cls else 0)
    eye = np.eye(n, dtype=np.float32)[None]
    return TraceFile(
        num_heads=1, num_tokens=n, head_dim=1, value_dim=1, grid_rows=rows, grid_cols=cols,
        has_cls=has_cls, has_qkv=False, has_attention=True,
        layers=[LayerTrace(attn=eye.copy()) for _ in range(layers)],
    )


GOLDEN_CFG = EncoderConfig(layers=8, heads=4, model_dim=32, mlp_dim=64, grid_rows=6, grid_cols=6, seed=7, weight_range=0.6)


@pytest.fixture(scope="session")
def golden_trace():
    return generate_trace(GOLDEN_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
