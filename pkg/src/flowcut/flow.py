"""Information-flow diagnostics over encoder traces.

Everything here is read-only analysis: argmax inflow/outflow graphs, attention
distance on the patch grid, entropy curves of the global attention vector,
value-norm statistics and the cross-criterion contradiction report.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .engine import attention_entropy, global_attention, multi_criteria_score, round_half_away, value_rows
from .tensor import ShapeError, TraceFile, attention_from_qk, average_heads, concat_heads, l1_norm_rows


@dataclass(frozen=True)
class TokenGrid:
    rows: int
    cols: int
    has_cls: bool = True

    @property
    def offset(self) -> int:
        return 1 if self.has_cls else 0

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols + self.offset

    def is_cls(self, i: int) -> bool:
        return self.has_cls and i == 0

    def coord(self, i: int):
        """(row, col) of token ``i``; ``None`` for the CLS token."""
        if self.is_cls(i):
            return None
        p = i - self.offset
        if not 0 <= p < self.rows * self.cols:
            raise IndexError(f"token {i} outside {self.rows}x{self.cols} grid")
        return divmod(p, self.cols)

    @property
    def diagonal(self) -> float:
        return math.hypot(self.rows - 1, self.cols - 1)

    @classmethod
    def for_trace(cls, trace: TraceFile) -> "TokenGrid":
        return cls(trace.grid_rows, trace.grid_cols, trace.has_cls)


@dataclass
class FlowGraph:
    layer: int
    inflow: np.ndarray
    outflow: np.ndarray
    # per-token distance to the strongest patch source; NaN for CLS
    distance: np.ndarray
    mean_attention_distance: float


def flow_graph(a_avg: np.ndarray, grid: TokenGrid, layer: int = 0) -> FlowGraph:
    a = np.asarray(a_avg, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"attention map must be square, got {a.shape}")
    if a.shape[0] != grid.num_tokens:
        raise ShapeError(f"{a.shape[0]} tokens but grid holds {grid.num_tokens}")
    # np.argmax returns the first maximum, i.e. ties go to the lower index
    inflow = np.argmax(a, axis=1)
    outflow = np.argmax(a, axis=0)
    off = grid.offset
    patch_src = np.argmax(a[:, off:], axis=1) + off
    dist = np.full(a.shape[0], np.nan)
    for i in range(off, a.shape[0]):
        r0, c0 = grid.coord(i)
        r1, c1 = grid.coord(int(patch_src[i]))
        dist[i] = math.hypot(r0 - r1, c0 - c1)
    patches = dist[off:]
    mean = float(patches.mean()) if len(patches) else 0.0
    return FlowGraph(layer=layer, inflow=inflow, outflow=outflow, distance=dist, mean_attention_distance=mean)


def layer_attention(trace: TraceFile, layer: int) -> np.ndarray:
    lt = trace.layers[layer]
    if lt.attn is not None:
        return average_heads(lt.attn)
    return average_heads(attention_from_qk(lt.q, lt.k, trace.head_dim))


def flow_graphs(trace: TraceFile) -> list[FlowGraph]:
    grid = TokenGrid.for_trace(trace)
    return [flow_graph(layer_attention(trace, l), grid, l) for l in range(trace.num_layers)]


def entropy_curve(trace: TraceFile) -> list[tuple[float, float, float]]:
    """Per-layer ``(H, H_max, r_H)`` of the global attention vector."""
    return [attention_entropy(global_attention(lt, trace.has_cls)) for lt in trace.layers]


@dataclass
class DensitySummary:
    layer: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float


def _patch_value_norms(trace: TraceFile, layer: int) -> np.ndarray:
    lt = trace.layers[layer]
    if lt.v is None:
        raise ValueError("trace lacks QKV")
    v = concat_heads(lt.v.astype(np.float64))
    return l1_norm_rows(v[1:] if trace.has_cls else v)


def density_stats(trace: TraceFile) -> list[DensitySummary]:
    if not trace.has_qkv:
        raise ValueError("trace lacks QKV")
    out = []
    for l in range(trace.num_layers):
        norms = _patch_value_norms(trace, l)
        q1, med, q3 = np.quantile(norms, [0.25, 0.5, 0.75])
        out.append(
            DensitySummary(l, float(norms.min()), float(q1), float(med), float(q3), float(norms.max()), float(norms.mean()))
        )
    return out


def rank_desc(values) -> np.ndarray:
    """Rank 0 = largest; equal values ranked by ascending index."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(len(values))
    return ranks


def spearman_from_ranks(ra, rb) -> float:
    n = len(ra)
    if n < 2:
        return 1.0
    d = np.asarray(ra, dtype=np.float64) - np.asarray(rb, dtype=np.float64)
    return float(1.0 - 6.0 * (d**2).sum() / (n * (n * n - 1)))


@dataclass
class CriteriaProfile:
    layer: int
    attn: np.ndarray
    sim: np.ndarray
    density: np.ndarray
    rank_attn: np.ndarray
    rank_sim: np.ndarray
    rank_density: np.ndarray
    contradictory: list
    correlations: dict
    q: float


def contradictions(rank_attn, rank_sim, rank_density, q: float) -> list[int]:
    n = len(rank_attn)
    k = max(1, round_half_away(q * n))
    bottom = n - k
    return [
        i for i in range(n) if rank_attn[i] < k and (rank_density[i] >= bottom or rank_sim[i] >= bottom)
    ]


def profile_from_criteria(attn, sim, density, q: float = 0.2, layer: int = 0) -> CriteriaProfile:
    if not 0 < q <= 0.5:
        raise ValueError("q must lie in (0, 0.5]")
    ra, rs, rd = rank_desc(attn), rank_desc(sim), rank_desc(density)
    return CriteriaProfile(
        layer=layer,
        attn=np.asarray(attn, dtype=np.float64),
        sim=np.asarray(sim, dtype=np.float64),
        density=np.asarray(density, dtype=np.float64),
        rank_attn=ra,
        rank_sim=rs,
        rank_density=rd,
        contradictory=contradictions(ra, rs, rd, q),
        correlations={
            "attn_sim": spearman_from_ranks(ra, rs),
            "attn_density": spearman_from_ranks(ra, rd),
            "sim_density": spearman_from_ranks(rs, rd),
        },
        q=q,
    )


def criteria_report(trace: TraceFile, layer: int, q: float = 0.2) -> CriteriaProfile:
    if not 0 <= layer < trace.num_layers:
        raise IndexError(f"layer {layer} out of range for {trace.num_layers}-layer trace")
    lt = trace.layers[layer]
    a_g = global_attention(lt, trace.has_cls)
    v_patch, v_g = value_rows(lt, trace.has_cls)
    i_a, i_s, i_d, _ = multi_criteria_score(a_g, v_patch, v_g)
    return profile_from_criteria(i_a, i_s, i_d, q, layer)


# ----------------------------------------------------------------------------
# CSV writers (comma separated, header row, LF endings)
# ----------------------------------------------------------------------------


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def entropy_csv(trace: TraceFile) -> str:
    rows = [(l, _num(h), _num(hm), _num(r)) for l, (h, hm, r) in enumerate(entropy_curve(trace))]
    return _csv(["layer", "H", "H_max", "r_H"], rows)


def flow_csv(trace: TraceFile) -> str:
    rows = []
    for g in flow_graphs(trace):
        for i in range(len(g.inflow)):
            rows.append((g.layer, i, int(g.inflow[i]), int(g.outflow[i]), _num(g.distance[i])))
    return _csv(["layer", "token", "inflow", "outflow", "distance"], rows)


def density_csv(trace: TraceFile) -> str:
    rows = [(s.layer, _num(s.min), _num(s.q1), _num(s.median), _num(s.q3), _num(s.max), _num(s.mean)) for s in density_stats(trace)]
    return _csv(["layer", "min", "q1", "median", "q3", "max", "mean"], rows)


def criteria_csv(profile: CriteriaProfile) -> str:
    flagged = set(profile.contradictory)
    rows = [
        (
            i,
            _num(profile.attn[i]),
            _num(profile.sim[i]),
            _num(profile.density[i]),
            int(profile.rank_attn[i]),
            int(profile.rank_sim[i]),
            int(profile.rank_density[i]),
            int(i in flagged),
        )
        for i in range(len(profile.attn))
    ]
    return _csv(["token", "attn", "sim", "density", "rank_attn", "rank_sim", "rank_density", "contradictory"], rows)
