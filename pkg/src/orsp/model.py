"""Parameter layout and the teacher-forced forward pass over one trial."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .context import (encode_context, encode_context_early_fusion, image_feature,
                      init_context_params, next_token_logits, patch_means)
from .domain import EOT_ID, ModelConfig, Trial
from .hesd import history_prefix_states, init_hesd_params, predict_pack_nodes
from .numerics import Node, ParamStore, Tape
from .packcodec import build_history, encode_pack, truncate


def init_params(cfg: ModelConfig, seed: int) -> ParamStore:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CA9]))
    store = ParamStore()
    init_context_params(store, cfg, rng)
    init_hesd_params(store, cfg, rng)
    return store


@dataclass(frozen=True, eq=False)
class TrialTensors:
    """Everything the teacher-forced forward pass needs, precomputed once per trial."""

    ids: list[int]             # BOT, w_1..w_L, EOT
    means: np.ndarray          # [192] patch means
    coords: np.ndarray         # [L+2, L_p, 2]
    validity: np.ndarray       # [L+2, L_p]
    history: np.ndarray        # [L_h, 4] over all (truncated) GT packs
    counts: list[int]          # rows contributed by each pack

    @property
    def n_packs(self) -> int:
        return len(self.ids)

    @property
    def next_tokens(self) -> list[int]:
        return self.ids[1:-1] + [EOT_ID]


def trial_tensors(trial: Trial, L_p: int) -> TrialTensors:
    packs = [truncate(p, L_p) for p in trial.gt_scanpath.packs]
    enc = [encode_pack(p, L_p) for p in packs]
    return TrialTensors(
        ids=trial.expression.with_sentinels(),
        means=patch_means(trial.image),
        coords=np.stack([e.coords for e in enc]),
        validity=np.stack([e.validity for e in enc]),
        history=build_history(packs, L_p),
        counts=[len(p) for p in packs],
    )


@dataclass
class ForwardOut:
    X: Node        # [L+2, L_p]
    Y: Node
    V: Node
    logits: Node | None  # [L+1, vocab], None when the text loss is disabled


def forward(tape: Tape, tt: TrialTensors, cfg: ModelConfig) -> ForwardOut:
    img = image_feature(tape, tt.means)
    hist = None
    if not cfg.no_hesd:
        hist = history_prefix_states(tape, tt.history, tt.counts, cfg)
    if cfg.early_fusion:
        ctx = encode_context_early_fusion(tape, img, tt.ids, hist, cfg)
    else:
        ctx = encode_context(tape, img, tt.ids, cfg)
    H = nx.stack(ctx.rows)
    h_joint = nx.stack(hist) if (hist is not None and not cfg.early_fusion) else None
    X, Y, V = predict_pack_nodes(tape, H, h_joint, cfg)
    logits = None
    if not cfg.no_txt_loss:
        logits = next_token_logits(tape, nx.rows(H, 0, tt.n_packs - 1))
    return ForwardOut(X, Y, V, logits)
