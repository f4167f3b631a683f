"""Closed-form prefill FLOPs for a vision tower + language model stack.

Per layer with ``n`` tokens, hidden size ``d`` and MLP width ``m``::

    2 * (4*n*d^2 + 2*n^2*d + 2*n*d*m)

i.e. Q/K/V/O projections, attention scores plus weighted sum, and a
two-matrix MLP, with one multiply-add counted as 2 FLOPs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

DEFAULT_TEXT_TOKENS = 40


@dataclass(frozen=True)
class StackDims:
    layers: int
    hidden: int
    intermediate: int

    def __post_init__(self):
        if min(self.layers, self.hidden, self.intermediate) <= 0:
            raise ValueError("model dimensions must be positive")


@dataclass(frozen=True)
class ModelDims:
    layers: int
    hidden: int
    intermediate: int
    vision: Optional[StackDims] = None
    # tokens the vision tower processes per image (CLS included)
    vision_tokens: int = 0
    max_visual_tokens: int = 0

    def __post_init__(self):
        if min(self.layers, self.hidden, self.intermediate) <= 0:
            raise ValueError("model dimensions must be positive")

    @property
    def language(self) -> StackDims:
        return StackDims(self.layers, self.hidden, self.intermediate)


PRESETS = {
    # Vicuna-7B language model + CLIP ViT-L/14 @ 336px (576 patches + CLS)
    "llava15-7b": ModelDims(
        32, 4096, 11008, vision=StackDims(24, 1024, 4096), vision_tokens=577, max_visual_tokens=576
    ),
    # same stack, AnyRes: base image + 4 crops, 5 x 576 visual tokens
    "llava-next-7b": ModelDims(
        32, 4096, 11008, vision=StackDims(24, 1024, 4096), vision_tokens=5 * 577, max_visual_tokens=2880
    ),
}


def preset(name: str) -> ModelDims:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class TokenSchedule:
    # visual tokens entering each language-model layer
    visual: Sequence[int]
    text_tokens: int = DEFAULT_TEXT_TOKENS
    vision_tokens: int = 0

    def __post_init__(self):
        self.visual = [int(n) for n in self.visual]
        if any(n < 0 for n in self.visual) or self.text_tokens < 0 or self.vision_tokens < 0:
            raise ValueError("token counts must be non-negative")
        if any(b > a for a, b in zip(self.visual, self.visual[1:])):
            raise ValueError("per-layer visual token counts must be non-increasing")


def uniform_schedule(dims: ModelDims, visual_tokens: int, text_tokens: int = DEFAULT_TEXT_TOKENS) -> TokenSchedule:
    """Same visual count at every LLM layer; the vision tower only runs when there is an image."""
    return TokenSchedule(
        visual=[visual_tokens] * dims.layers,
        text_tokens=text_tokens,
        vision_tokens=dims.vision_tokens if visual_tokens > 0 else 0,
    )


def layer_flops(n: int, d: int, m: int) -> dict:
    proj = 2 * 4 * n * d * d
    attn = 2 * 2 * n * n * d
    mlp = 2 * 2 * n * d * m
    return {"tokens": n, "projection": proj, "attention": attn, "mlp": mlp, "total": proj + attn + mlp}


def flops_breakdown(dims: ModelDims, sched: TokenSchedule) -> dict:
    if len(sched.visual) != dims.layers:
        raise ValueError(f"schedule has {len(sched.visual)} layers, model has {dims.layers}")
    vision_layers = []
    if dims.vision is not None and sched.vision_tokens > 0:
        v = dims.vision
        vision_layers = [layer_flops(sched.vision_tokens, v.hidden, v.intermediate) for _ in range(v.layers)]
    lm_layers = [layer_flops(n + sched.text_tokens, dims.hidden, dims.intermediate) for n in sched.visual]
    vision_total = sum(l["total"] for l in vision_layers)
    lm_total = sum(l["total"] for l in lm_layers)
    return {
        "total_flops": vision_total + lm_total,
        "vision_flops": vision_total,
        "language_flops": lm_total,
        "per_layer": {"vision": vision_layers, "language": lm_layers},
        "assumptions": {
            "formula": "2*(4*n*d^2 + 2*n^2*d + 2*n*d*m) per layer, multiply-add = 2 FLOPs",
            "includes_vision_tower": bool(vision_layers),
            "includes_text_tokens": sched.text_tokens > 0,
            "text_tokens": sched.text_tokens,
            "vision_tokens": sched.vision_tokens,
            "visual_tokens_per_layer": list(sched.visual),
            "dims": asdict(dims),
            "phase": "prefill only; no decode or KV-cache reads",
        },
    }


def flops_prefill(dims: ModelDims, sched: TokenSchedule) -> float:
    return float(flops_breakdown(dims, sched)["total_flops"])
