"""Helpers shared by the experiment scripts."""

import numpy as np

from flowcut.encoder import EncoderConfig, build_encoder, encode, synthetic_input
from flowcut.engine import run_schedule


def demo_config(layers=12, grid=8, seed=0, weight_range=0.6) -> EncoderConfig:
    return EncoderConfig(layers=layers, grid_rows=grid, grid_cols=grid, seed=seed, weight_range=weight_range)


def full_cls(cfg: EncoderConfig, image_seed: int) -> np.ndarray:
    state = build_encoder(cfg)
    encode(state, synthetic_input(cfg, image_seed))
    return state.hidden[0].copy()


def pruned_cls(cfg: EncoderConfig, prune_cfg, image_seed: int):
    state = build_encoder(cfg)
    report = run_schedule(state, prune_cfg, synthetic_input(cfg, image_seed))
    return state.hidden[0].copy(), report


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def fidelity(cfg: EncoderConfig, prune_cfg, images: int) -> float:
    """Mean CLS cosine similarity between pruned and unpruned runs."""
    sims = []
    for i in range(images):
        got, _ = pruned_cls(cfg, prune_cfg, i)
        sims.append(cosine(got, full_cls(cfg, i)))
    return float(np.mean(sims))
