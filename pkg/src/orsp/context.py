"""Stub context encoder: image descriptor + unidirectional GRU over the token prefix.

H_j is the recurrent state after consuming token j, so it can only depend on the
image and tokens 0..j. The next-token head reads H_j to predict token j+1.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .domain import IMAGE_H, IMAGE_W, ImageRaster, ModelConfig
from .numerics import Node, ParamStore, Tape

PATCH_GRID = 8
N_PATCH_FEATURES = PATCH_GRID * PATCH_GRID * 3


def patch_means(image: ImageRaster) -> np.ndarray:
    """Per-patch channel means on an 8x8 grid, flattened (row, col, channel) -> [192]."""
    px = image.pixels
    if px.shape != (IMAGE_H, IMAGE_W, 3):
        raise ValueError(f"image must be {IMAGE_H}x{IMAGE_W}x3, got {px.shape}")
    ph, pw = IMAGE_H // PATCH_GRID, IMAGE_W // PATCH_GRID
    blocks = px.reshape(PATCH_GRID, ph, PATCH_GRID, pw, 3).astype(np.float64)
    return (blocks.mean(axis=(1, 3)) / 255.0).reshape(-1)


def init_context_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    store.add("img.W", rng.normal(0.0, 1.0 / np.sqrt(N_PATCH_FEATURES), (N_PATCH_FEATURES, cfg.d_img)))
    store.add("img.b", np.zeros(cfg.d_img))
    store.add("tok.emb", rng.normal(0.0, 1.0, (cfg.vocab_size, cfg.d_emb)))
    nx.gru_params(store, "ctx.gru", cfg.d_emb + cfg.d_img, cfg.d_ctx, rng)
    store.add("lm.W", rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ctx), (cfg.d_ctx, cfg.vocab_size)))
    store.add("lm.b", np.zeros(cfg.vocab_size))
    if cfg.early_fusion:
        store.add("fuse.W", rng.normal(0.0, 1.0 / np.sqrt(cfg.d_hist), (cfg.d_hist, cfg.d_emb)))
        store.add("fuse.b", np.zeros(cfg.d_emb))


def image_feature(tape: Tape, means: np.ndarray) -> Node:
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (N_PATCH_FEATURES,):
        raise ValueError(f"expected {N_PATCH_FEATURES} patch means, got {means.shape}")
    return nx.affine(tape.const(means), tape.param("img.W"), tape.param("img.b"))


@dataclass
class ContextStates:
    rows: list[Node]

    @property
    def states(self) -> np.ndarray:
        return np.stack([r.value for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)


def _check_ids(token_ids: Sequence[int], vocab_size: int) -> None:
    for t in token_ids:
        if not 0 <= t < vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")


def context_step(tape: Tape, h_prev: Node, token_id: int, img: Node,
                 hist: Node | None = None) -> Node:
    """Consume one token; ``hist`` is the early-fusion history vector for this position."""
    emb = nx.row(tape.param("tok.emb"), token_id)
    if hist is not None:
        emb = nx.add(emb, nx.affine(hist, tape.param("fuse.W"), tape.param("fuse.b")))
    return nx.gru_cell(nx.concat([emb, img]), h_prev, tape, "ctx.gru")


def initial_state(tape: Tape, cfg: ModelConfig) -> Node:
    return tape.const(np.zeros(cfg.d_ctx))


def encode_context(tape: Tape, img: Node, token_ids: Sequence[int], cfg: ModelConfig) -> ContextStates:
    """H_0..H_{L+1} for ``token_ids`` (which already include BOT and EOT)."""
    _check_ids(token_ids, cfg.vocab_size)
    h = initial_state(tape, cfg)
    rows = []
    for t in token_ids:
        h = context_step(tape, h, t, img)
        rows.append(h)
    return ContextStates(rows)


def encode_context_early_fusion(tape: Tape, img: Node, token_ids: Sequence[int],
                                history: Sequence[Node], cfg: ModelConfig) -> ContextStates:
    """As ``encode_context`` with history projected and added to each token embedding.

    ``history[j]`` must derive from packs before j, which keeps H_j prefix-causal.
    """
    _check_ids(token_ids, cfg.vocab_size)
    if len(history) != len(token_ids):
        raise nx.ShapeError(f"need one history row per token: {len(history)} vs {len(token_ids)}")
    h = initial_state(tape, cfg)
    rows = []
    for t, hist in zip(token_ids, history):
        h = context_step(tape, h, t, img, hist)
        rows.append(h)
    return ContextStates(rows)


def next_token_logits(tape: Tape, H: Node) -> Node:
    return nx.affine(H, tape.param("lm.W"), tape.param("lm.b"))
