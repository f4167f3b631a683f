"""FlowCut pruning: global attention, adaptive prune counts, multi-criteria
scores, cumulative tracking and the layer-wise schedule.

Token indices in reports are *patch* indices (0 .. num_patches-1); the CLS
token, when present, is never scored or dropped.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .encoder import EncoderState, drop_tokens, encode_step, load_input, synthetic_input
from .tensor import (
    LayerTrace,
    TraceFile,
    _softmax_last,
    attention_from_qk,
    average_heads,
    concat_heads,
    l1_norm_rows,
    matmul,
)


class ScheduleError(ValueError):
    pass


def round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


# ----------------------------------------------------------------------------
# per-layer signals
# ----------------------------------------------------------------------------


def _token_index(layer: LayerTrace, has_cls: bool, tokens) -> np.ndarray:
    if tokens is None:
        return np.arange(layer.num_tokens)
    tokens = np.asarray(tokens, dtype=np.int64)
    if has_cls and (len(tokens) == 0 or tokens[0] != 0):
        raise ValueError("token subset must start with the CLS token")
    return tokens


def global_attention(layer: LayerTrace, has_cls: bool, tokens=None) -> np.ndarray:
    """Global attention vector over the patch tokens in ``tokens``.

    ``tokens`` selects a subset of token rows/columns (CLS first when
    present); the result is renormalised over the selected patches.
    """
    idx = _token_index(layer, has_cls, tokens)
    if has_cls:
        if layer.attn is not None:
            row = layer.attn[:, idx[:1]][:, :, idx[1:]].astype(np.float64)
        elif layer.q is not None:
            q, k = layer.q[:, idx], layer.k[:, idx]
            row = attention_from_qk(q, k, q.shape[-1])[:, :1, 1:]
        else:
            raise ValueError("layer has neither attention nor QKV")
        a = average_heads(row)[0]
        total = a.sum()
        if total <= 0:
            raise ValueError("CLS row has no mass on patch tokens")
        return a / total
    if layer.q is None:
        raise ValueError("CLS-free global attention needs Q and K")
    q, k = layer.q[:, idx].astype(np.float64), layer.k[:, idx].astype(np.float64)
    q_g = q.mean(axis=1, keepdims=True)
    logits = matmul(q_g, np.swapaxes(k, -1, -2)) / np.sqrt(q.shape[-1])
    return average_heads(_softmax_last(logits))[0]


def attention_entropy(a: np.ndarray) -> tuple[float, float, float]:
    """Natural-log entropy, its maximum ``ln N`` and their ratio."""
    a = np.asarray(a, dtype=np.float64)
    nz = a[a > 0]
    h = float(-(nz * np.log(nz)).sum())
    h_max = math.log(len(a)) if len(a) > 0 else 0.0
    if h_max <= 0:
        return 0.0, 0.0, 1.0
    h = min(max(h, 0.0), h_max)
    return h, h_max, min(h / h_max, 1.0)


def value_rows(layer: LayerTrace, has_cls: bool, tokens=None) -> tuple[np.ndarray, np.ndarray]:
    """(patch value rows, global value vector), heads concatenated."""
    if layer.v is None:
        raise ValueError("trace lacks QKV")
    idx = _token_index(layer, has_cls, tokens)
    v = concat_heads(layer.v[:, idx].astype(np.float64))
    if has_cls:
        return v[1:], v[0]
    return v, v.mean(axis=0)


# ----------------------------------------------------------------------------
# scoring primitives
# ----------------------------------------------------------------------------


def prune_count(n_active: int, stage_target: int, remaining: int, r_h: float) -> int:
    room = n_active - stage_target
    p = round_half_away(room / math.sqrt(remaining) * (1.0 - r_h**2))
    return min(max(p, 0), max(room, 0))


def combine_scores(i_a, i_s, i_d) -> np.ndarray:
    i_a, i_s, i_d = (np.asarray(x, dtype=np.float64) for x in (i_a, i_s, i_d))
    sa, ss = i_a.sum(), i_s.sum()
    if sa == 0 or ss == 0:
        raise ValueError("cannot normalise a zero-sum criterion")
    return (i_a / sa + i_s / ss) * i_d


def multi_criteria_score(a_g, v_patch, v_g, multi_criteria: bool = True):
    """Return ``(I_a, I_s, I_d, S)`` for the active patches.

    With ``multi_criteria`` off the score is the attention vector itself.
    """
    i_a = np.asarray(a_g, dtype=np.float64)
    v_patch = np.asarray(v_patch, dtype=np.float64)
    v_g = np.asarray(v_g, dtype=np.float64)
    if v_patch.shape[0] != i_a.shape[0]:
        raise ValueError(f"{v_patch.shape[0]} value rows for {i_a.shape[0]} attention entries")
    logits = matmul(v_g[None, :], v_patch.T)[0] / np.sqrt(v_patch.shape[1])
    i_s = _softmax_last(logits)
    i_d = l1_norm_rows(v_patch)
    s = combine_scores(i_a, i_s, i_d) if multi_criteria else i_a.copy()
    return i_a, i_s, i_d, s


def cumulative_update(prev, cur, w_history: float = 0.5, w_current: float = 0.5, cumulative: bool = True):
    cur = np.asarray(cur, dtype=np.float64)
    if prev is None or not cumulative:
        return cur.copy()
    prev = np.asarray(prev, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ValueError(f"length mismatch: {prev.shape} vs {cur.shape}")
    return w_history * prev + w_current * cur


def select_keep(scores, keep: int) -> tuple[np.ndarray, np.ndarray]:
    """Positions of the ``keep`` largest scores (ties -> lower index) and the rest."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= keep <= len(scores):
        raise ValueError(f"keep={keep} out of range for {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:keep]), np.sort(order[keep:])


# ----------------------------------------------------------------------------
# configuration and reports
# ----------------------------------------------------------------------------

Location = Union[int, str]


@dataclass
class PruneConfig:
    target: int
    interval: int = 2
    weight_history: float = 0.5
    weight_current: float = 0.5
    adaptive_count: bool = True
    cumulative: bool = True
    multi_criteria: bool = True
    # only prune at each stage's final layer
    single_event: bool = False
    # (location, stage_target); location is a layer index, "penultimate" or "post"
    stages: tuple = ()
    mode: Optional[str] = None

    def stage_list(self) -> list[tuple[Location, int]]:
        return [tuple(s) for s in self.stages] if self.stages else [("penultimate", self.target)]

    def resolved_stages(self, num_layers: int) -> list[tuple[int, int]]:
        out = []
        for loc, tgt in self.stage_list():
            out.append((resolve_location(loc, num_layers), int(tgt)))
        return out

    def validate(self, num_patches: int, num_layers: int) -> None:
        if self.interval < 1:
            raise ScheduleError("interval must be >= 1")
        for w in (self.weight_history, self.weight_current):
            if not 0.0 <= w <= 1.0:
                raise ScheduleError("cumulative weights must lie in [0, 1]")
        if abs(self.weight_history + self.weight_current - 1.0) > 1e-9:
            raise ScheduleError("cumulative weights must sum to 1")
        if not 0 < self.target <= num_patches:
            raise ScheduleError(f"target {self.target} infeasible for {num_patches} patches")
        if self.mode not in (None, "live", "trace"):
            raise ScheduleError(f"unknown mode {self.mode!r}")
        stages = self.resolved_stages(num_layers)
        if stages[-1][1] != self.target:
            raise ScheduleError("last stage target must equal the overall target")
        # a first-stage target equal to the patch count is a no-op stage
        prev_loc, prev_tgt = -1, num_patches + 1
        for loc, tgt in stages:
            if loc <= prev_loc:
                raise ScheduleError("stage locations must be strictly increasing")
            if tgt >= prev_tgt or tgt <= 0:
                raise ScheduleError("stage targets must be positive and strictly decreasing")
            prev_loc, prev_tgt = loc, tgt


def resolve_location(loc: Location, num_layers: int) -> int:
    if loc == "penultimate":
        layer = num_layers - 2
    elif loc == "post":
        layer = num_layers - 1
    else:
        layer = int(loc)
    if layer < 0 or layer >= num_layers:
        raise ScheduleError(f"trace too short: stage location {loc!r} needs layer {layer}, have {num_layers}")
    return layer


def event_layers(cfg: PruneConfig, num_layers: int) -> list[list[int]]:
    """Prune-event layers, one list per stage."""
    out = []
    start = 0
    n = cfg.interval
    for loc, _ in cfg.resolved_stages(num_layers):
        if cfg.single_event:
            layers = [loc]
        else:
            layers = [l for l in range(start, loc) if l % n == n - 1] + [loc]
        out.append(layers)
        start = loc + 1
    return out


@dataclass
class LayerDecision:
    layer: int
    stage: int
    tokens_before: int
    H: float
    H_max: float
    r_H: float
    remaining: int
    P: int
    kept: list
    dropped: list
    active_before: list
    I_a: list
    I_s: Optional[list]
    I_d: Optional[list]
    S: list
    S_cum: list

    def record(self, scores: bool = False) -> dict:
        rec = {
            "layer": self.layer,
            "stage": self.stage,
            "tokens_before": self.tokens_before,
            "H": self.H,
            "H_max": self.H_max,
            "r_H": self.r_H,
            "L": self.remaining,
            "P": self.P,
            "kept": self.kept,
            "dropped": self.dropped,
        }
        if scores:
            rec["scores"] = {
                "tokens": self.active_before,
                "I_a": self.I_a,
                "I_s": self.I_s,
                "I_d": self.I_d,
                "S": self.S,
                "S_cum": self.S_cum,
            }
        return rec


@dataclass
class LayerRecord:
    layer: int
    tokens: int
    H: float
    H_max: float
    r_H: float


@dataclass
class PruneReport:
    config: PruneConfig
    mode: str
    num_layers: int
    initial_tokens: int
    decisions: list = field(default_factory=list)
    layers: list = field(default_factory=list)
    final_kept: list = field(default_factory=list)
    approximation: Optional[str] = None

    @property
    def token_counts(self) -> list[int]:
        return [r.tokens for r in self.layers]

    def to_dict(self, scores: bool = False) -> dict:
        cfg = asdict(self.config)
        cfg["stages"] = [list(s) for s in self.config.stage_list()]
        return {
            "config": cfg,
            "mode": self.mode,
            "num_layers": self.num_layers,
            "initial_tokens": self.initial_tokens,
            "events": [d.record(scores) for d in self.decisions],
            "final_kept": self.final_kept,
            "final_count": len(self.final_kept),
            "token_counts": self.token_counts,
            "entropy": [asdict(r) for r in self.layers],
            "approximation": self.approximation,
        }

    def to_json(self, scores: bool = False) -> str:
        return json.dumps(self.to_dict(scores), indent=2, sort_keys=False) + "\n"

    def decisions_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "stage", "tokens_before", "H", "r_H", "L", "P", "dropped", "kept"])
        for d in self.decisions:
            w.writerow([d.layer, d.stage, d.tokens_before, repr(d.H), repr(d.r_H), d.remaining, d.P, len(d.dropped), len(d.kept)])
        return buf.getvalue()


# ----------------------------------------------------------------------------
# scheduler
# ----------------------------------------------------------------------------

TRACE_MODE_NOTE = (
    "trace mode: pruned tokens are masked out of recorded attention and value "
    "rows and the global attention is renormalised; the encoder is not re-run"
)


class _TraceSource:
    mode = "trace"

    def __init__(self, trace: TraceFile):
        self.trace = trace
        self.has_cls = trace.has_cls
        self.num_layers = trace.num_layers
        self.num_patches = trace.num_patches
        self.offset = 1 if trace.has_cls else 0

    def layer(self, index: int, active: np.ndarray):
        tokens = active + self.offset
        if self.has_cls:
            tokens = np.concatenate([[0], tokens])
        return self.trace.layers[index], tokens

    def drop(self, dropped: np.ndarray) -> None:
        pass


class _LiveSource:
    mode = "live"

    def __init__(self, state: EncoderState):
        self.state = state
        self.has_cls = state.cfg.has_cls
        self.num_layers = state.cfg.layers
        self.num_patches = state.cfg.num_patches
        self.offset = 1 if self.has_cls else 0

    def layer(self, index: int, active: np.ndarray):
        layer = encode_step(self.state, index)
        return layer, np.arange(layer.num_tokens)

    def drop(self, dropped: np.ndarray) -> None:
        drop_tokens(self.state, dropped + self.offset)


def run_schedule(source, cfg: PruneConfig, input_grid=None) -> PruneReport:
    """Run the pruning schedule over a ``TraceFile`` or a live ``EncoderState``."""
    if isinstance(source, TraceFile):
        src = _TraceSource(source)
    elif isinstance(source, EncoderState):
        if input_grid is not None:
            load_input(source, input_grid)
        elif source.hidden is None:
            load_input(source, synthetic_input(source.cfg))
        if source.next_layer != 0:
            raise ScheduleError("live encoder must start at layer 0")
        src = _LiveSource(source)
    else:
        raise TypeError(f"unsupported source {type(source).__name__}")
    if cfg.mode is not None and cfg.mode != src.mode:
        raise ScheduleError(f"config mode {cfg.mode!r} does not match a {src.mode} source")
    if src.num_layers < 1:
        raise ScheduleError("trace too short: no layers")
    cfg.validate(src.num_patches, src.num_layers)

    stages = cfg.resolved_stages(src.num_layers)
    events = event_layers(cfg, src.num_layers)
    event_at = {}
    for s, layers in enumerate(events):
        for j, l in enumerate(layers):
            event_at[l] = (s, j, len(layers))

    report = PruneReport(
        config=cfg,
        mode=src.mode,
        num_layers=src.num_layers,
        initial_tokens=src.num_patches,
        approximation=TRACE_MODE_NOTE if src.mode == "trace" else None,
    )
    active = np.arange(src.num_patches)
    s_cum = None
    stage_start_count = {}
    need_values = cfg.multi_criteria

    for l in range(src.num_layers):
        layer, tokens = src.layer(l, active)
        a_g = global_attention(layer, src.has_cls, tokens)
        h, h_max, r_h = attention_entropy(a_g)
        report.layers.append(LayerRecord(layer=l, tokens=len(active), H=h, H_max=h_max, r_H=r_h))

        if need_values or layer.v is not None:
            v_patch, v_g = value_rows(layer, src.has_cls, tokens)
            i_a, i_s, i_d, s = multi_criteria_score(a_g, v_patch, v_g, cfg.multi_criteria)
        else:
            i_a, i_s, i_d, s = a_g, None, None, a_g.copy()
        s_cum = cumulative_update(s_cum, s, cfg.weight_history, cfg.weight_current, cfg.cumulative)

        if l not in event_at:
            continue
        stage, j, n_events = event_at[l]
        stage_target = stages[stage][1]
        n_active = len(active)
        if stage not in stage_start_count:
            stage_start_count[stage] = n_active
        if stage_start_count[stage] <= stage_target:
            # nothing to prune in this stage
            continue
        remaining = n_events - j
        room = n_active - stage_target
        if cfg.adaptive_count:
            p = prune_count(n_active, stage_target, remaining, r_h)
        else:
            quota = round_half_away((stage_start_count[stage] - stage_target) / n_events)
            p = min(max(quota, 0), room)
        n_drop = room if remaining == 1 else p
        keep_pos, drop_pos = select_keep(s_cum, n_active - n_drop)

        report.decisions.append(
            LayerDecision(
                layer=l,
                stage=stage,
                tokens_before=n_active,
                H=h,
                H_max=h_max,
                r_H=r_h,
                remaining=remaining,
                P=p,
                kept=active[keep_pos].tolist(),
                dropped=active[drop_pos].tolist(),
                active_before=active.tolist(),
                I_a=i_a.tolist(),
                I_s=None if i_s is None else i_s.tolist(),
                I_d=None if i_d is None else i_d.tolist(),
                S=s.tolist(),
                S_cum=s_cum.tolist(),
            )
        )
        src.drop(active[drop_pos])
        active = active[keep_pos]
        s_cum = s_cum[keep_pos]

    report.final_kept = active.tolist()
    return report


def baseline_single_layer(trace: TraceFile, layer: int, target: int) -> list[int]:
    """Top-``target`` patches by global attention at a single layer."""
    if not 0 <= layer < trace.num_layers:
        raise ValueError(f"layer {layer} out of range for {trace.num_layers}-layer trace")
    src = _TraceSource(trace)
    lt, tokens = src.layer(layer, np.arange(trace.num_patches))
    a_g = global_attention(lt, trace.has_cls, tokens)
    keep, _ = select_keep(a_g, target)
    return keep.tolist()


def single_layer_config(target: int) -> PruneConfig:
    """All toggles off, one event at the penultimate layer."""
    return PruneConfig(
        target=target,
        adaptive_count=False,
        cumulative=False,
        multi_criteria=False,
        single_event=True,
    )


def fixed_ratio_config(target: int, interval: int = 2) -> PruneConfig:
    """Multi-layer pruning with equal per-event quotas on attention alone."""
    return PruneConfig(
        target=target,
        interval=interval,
        adaptive_count=False,
        cumulative=False,
        multi_criteria=False,
    )
