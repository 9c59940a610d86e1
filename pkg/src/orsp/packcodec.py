"""Fixed-size FIX/PAD encoding of fixation packs and the history tensor."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import Fixation, FixationPack

PACK_INDEX_MAX = 30


@dataclass(frozen=True, eq=False)
class EncodedPack:
    coords: np.ndarray    # [L_p, 2]; PAD rows are (0, 0)
    validity: np.ndarray  # [L_p]; 1.0 FIX, 0.0 PAD, prefix pattern

    @property
    def n_valid(self) -> int:
        return int(self.validity.sum())


def encode_pack(pack: FixationPack, L_p: int) -> EncodedPack:
    if L_p < 1:
        raise ValueError("L_p must be >= 1")
    coords = np.zeros((L_p, 2))
    validity = np.zeros(L_p)
    for i, f in enumerate(pack.fixations[:L_p]):
        if not f.in_range():
            raise ValueError(f"fixation {i} ({f.x}, {f.y}) out of [0,1]")
        coords[i] = (f.x, f.y)
        validity[i] = 1.0
    return EncodedPack(coords, validity)


def truncate(pack: FixationPack, L_p: int) -> FixationPack:
    return FixationPack(pack.fixations[:L_p])


def decode_pack(X, Y, V, threshold: float = 0.5) -> FixationPack:
    """Keep slots while V >= threshold; the first slot below it ends the pack."""
    out = []
    for x, y, v in zip(X, Y, V):
        if v < threshold:
            break
        out.append(Fixation(float(x), float(y)))
    return FixationPack(tuple(out))


def history_rows(pack: FixationPack, pack_index: int, L_p: int,
                 pack_index_max: int = PACK_INDEX_MAX) -> np.ndarray:
    """Rows (x, y, pack_norm, order_norm) for the fixations of one pack."""
    n = len(pack)
    out = np.zeros((n, 4))
    if n == 0:
        return out
    out[:, :2] = pack.as_array()
    out[:, 2] = min(pack_index, pack_index_max) / (pack_index_max + 1)
    if L_p > 1:
        out[:, 3] = np.minimum(np.arange(n) / (L_p - 1), 1.0)
    return out


def build_history(packs: Sequence[FixationPack], L_p: int,
                  pack_index_max: int = PACK_INDEX_MAX) -> np.ndarray:
    """History tensor [L_h, 4] over all fixations of ``packs`` (packs 0..j-1)."""
    blocks = [history_rows(p, k, L_p, pack_index_max) for k, p in enumerate(packs)]
    if not blocks:
        return np.zeros((0, 4))
    return np.concatenate(blocks, axis=0)
