"""History Enhanced Scanpath Decoder and the autoregressive inference loop."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .context import (context_step, encode_context, image_feature, initial_state,
                      patch_means)
from .domain import FixationPack, ImageRaster, ModelConfig, ReferringExpression, Scanpath
from .numerics import Node, ParamStore, Tape
from .packcodec import decode_pack, history_rows

HEADS = ("x", "y", "v")


@dataclass(frozen=True, eq=False)
class PackPrediction:
    X: np.ndarray
    Y: np.ndarray
    V: np.ndarray


def head_input_width(cfg: ModelConfig) -> int:
    if cfg.early_fusion:
        return cfg.d_ctx
    return cfg.d_ctx + cfg.d_hist


def init_hesd_params(store: ParamStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    if cfg.no_hesd:
        store.add("linear.W", rng.normal(0.0, 1.0 / np.sqrt(cfg.d_ctx), (cfg.d_ctx, 3 * cfg.L_p)))
        store.add("linear.b", np.zeros(3 * cfg.L_p))
        return
    nx.gru_params(store, "hist.gru", 4, cfg.d_hist, rng)
    for head in HEADS:
        nx.mlp2_params(store, f"head.{head}", head_input_width(cfg), cfg.d_mlp, cfg.L_p, rng)


def history_step(tape: Tape, h: Node, row: np.ndarray) -> Node:
    return nx.gru_cell(tape.const(row), h, tape, "hist.gru")


def history_encode(tape: Tape, T: np.ndarray, cfg: ModelConfig) -> Node:
    """Final GRU state over the rows of T; the zero vector when T is empty."""
    T = np.asarray(T, dtype=np.float64)
    if T.size == 0:
        T = T.reshape(0, 4)
    if T.ndim != 2 or T.shape[1] != 4:
        raise nx.ShapeError(f"history rows must have width 4, got shape {T.shape}")
    h = tape.const(np.zeros(cfg.d_hist))
    for r in T:
        h = history_step(tape, h, r)
    return h


def history_prefix_states(tape: Tape, T: np.ndarray, counts: Sequence[int], cfg: ModelConfig) -> list[Node]:
    """History encodings available before each pack, from one GRU pass over T.

    ``counts[k]`` is the number of rows contributed by pack k; entry j of the
    result encodes packs 0..j-1 (so entry 0 is the zero state).
    """
    h = tape.const(np.zeros(cfg.d_hist))
    out = []
    pos = 0
    for n in counts:
        out.append(h)
        for r in T[pos:pos + n]:
            h = history_step(tape, h, r)
        pos += n
    return out


def predict_pack_nodes(tape: Tape, H: Node, h_hist: Node | None, cfg: ModelConfig) -> tuple[Node, Node, Node]:
    """(X, Y, V) nodes; H may be a single state [d_ctx] or a stack [n, d_ctx]."""
    if cfg.no_hesd:
        return predict_pack_linear_nodes(tape, H, cfg)
    joint = H if h_hist is None else nx.concat([H, h_hist])
    if joint.shape[-1] != head_input_width(cfg):
        raise nx.ShapeError(f"head input width {joint.shape[-1]} != {head_input_width(cfg)}")
    return tuple(nx.sigmoid(nx.mlp2(joint, tape, f"head.{h}")) for h in HEADS)


def predict_pack_linear_nodes(tape: Tape, H: Node, cfg: ModelConfig) -> tuple[Node, Node, Node]:
    out = nx.affine(H, tape.param("linear.W"), tape.param("linear.b"))
    L_p = cfg.L_p
    return tuple(nx.sigmoid(nx.cols(out, k * L_p, (k + 1) * L_p)) for k in range(3))


def _to_prediction(nodes) -> PackPrediction:
    X, Y, V = (n.value for n in nodes)
    return PackPrediction(X, Y, V)


def predict_pack(store: ParamStore, H_j: np.ndarray, h_hist: np.ndarray, cfg: ModelConfig) -> PackPrediction:
    tape = Tape(store, grad=False)
    hist = None if cfg.early_fusion else tape.const(h_hist)
    return _to_prediction(predict_pack_nodes(tape, tape.const(H_j), hist, cfg))


def predict_pack_linear(store: ParamStore, H_j: np.ndarray, cfg: ModelConfig) -> PackPrediction:
    tape = Tape(store, grad=False)
    return _to_prediction(predict_pack_linear_nodes(tape, tape.const(H_j), cfg))


def predict_scanpath(image: ImageRaster, expression: ReferringExpression, store: ParamStore,
                     cfg: ModelConfig, means: np.ndarray | None = None) -> Scanpath:
    """Autoregressive inference: one decoded pack per token of BOT, w_1..w_L, EOT.

    History is rebuilt from the packs this loop has already decoded.
    """
    tape = Tape(store, grad=False)
    img = image_feature(tape, patch_means(image) if means is None else means)
    ids = expression.with_sentinels()
    packs: list[FixationPack] = []

    if cfg.early_fusion:
        h_ctx = initial_state(tape, cfg)
    else:
        context = encode_context(tape, img, ids, cfg)
    h_hist = None if cfg.no_hesd else tape.const(np.zeros(cfg.d_hist))

    for j, tok in enumerate(ids):
        if j > 0 and h_hist is not None:
            for r in history_rows(packs[j - 1], j - 1, cfg.L_p):
                h_hist = history_step(tape, h_hist, r)
        if cfg.early_fusion:
            h_ctx = context_step(tape, h_ctx, tok, img, h_hist)
            X, Y, V = predict_pack_nodes(tape, h_ctx, None, cfg)
        else:
            X, Y, V = predict_pack_nodes(tape, context.rows[j], h_hist, cfg)
        packs.append(decode_pack(X.value, Y.value, V.value, cfg.decode_threshold))
    return Scanpath(tuple(packs))
