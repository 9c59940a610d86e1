"""Scanpath similarity (SS, FED and their per-pack forms) and per-pack saliency (CC, NSS).

Fixations are turned into strings of grid-cell labels for the similarity
metrics; the saliency metrics compare Gaussian-smoothed fixation maps.
Degenerate cases follow one fixed table:

* both strings empty -> SS 1, FED 0; one empty -> SS 0, FED = other length
* zero-variance map -> CC 0, NSS 0
* packs with empty ground truth are skipped for CC/NSS
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .domain import IMAGE_H, IMAGE_W, FixationPack, Scanpath

METRIC_NAMES = ("ss", "ss_pack", "fed", "fed_pack", "cc_pack", "nss_pack")
TABLE_HEADERS = ("SS↑", "SSpack↑", "FED↓", "FEDpack↓", "CCpack↑", "NSSpack↑")


@dataclass(frozen=True)
class MetricConfig:
    grid: tuple[int, int] = (8, 6)            # (G_x, G_y) for cluster strings
    saliency_grid: tuple[int, int] = (65, 39)  # 8-px cells at 520 x 312
    sigma_px: float = 16.0
    image_size: tuple[int, int] = (IMAGE_W, IMAGE_H)


def quantize(fixations, grid: tuple[int, int] = (8, 6)) -> tuple[int, ...]:
    """Cell label floor(x*G_x) + G_x*floor(y*G_y) per fixation; x = 1 or y = 1 fall in the last cell."""
    gx, gy = grid
    if isinstance(fixations, Scanpath):
        fixations = fixations.fixations()
    labels = []
    for f in fixations:
        cx = min(int(np.floor(f.x * gx)), gx - 1)
        cy = min(int(np.floor(f.y * gy)), gy - 1)
        labels.append(cx + gx * cy)
    return tuple(labels)


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs (two-row DP)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        prev = cur
    return prev[-1]


def sequence_score(a: Sequence, b: Sequence) -> float:
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return 1.0 - edit_distance(a, b) / n


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    grid: np.ndarray   # [G_y, G_x]
    sigma_px: float


def _cell(f, grid: tuple[int, int]) -> tuple[int, int]:
    gx, gy = grid
    return min(int(np.floor(f.y * gy)), gy - 1), min(int(np.floor(f.x * gx)), gx - 1)


def saliency_map(pack: FixationPack, sigma_px: float = 16.0, grid: tuple[int, int] = (65, 39),
                 image_size: tuple[int, int] = (IMAGE_W, IMAGE_H)) -> SaliencyMap:
    """Unit impulse per fixation cell, blurred by an isotropic Gaussian truncated at 3 sigma."""
    if sigma_px <= 0:
        raise ValueError("sigma_px must be positive")
    gx, gy = grid
    m = np.zeros((gy, gx))
    for f in pack:
        m[_cell(f, grid)] += 1.0
    if len(pack):
        cell_w, cell_h = image_size[0] / gx, image_size[1] / gy
        m = gaussian_filter(m, sigma=(sigma_px / cell_h, sigma_px / cell_w), mode="constant", truncate=3.0)
    return SaliencyMap(m, sigma_px)


def _is_constant(a: np.ndarray) -> bool:
    # exact test; a computed variance of a constant map can come out as ~1e-33
    return bool(np.all(a == a.flat[0]))


def cc(m1: SaliencyMap, m2: SaliencyMap) -> float:
    a, b = m1.grid, m2.grid
    if a.shape != b.shape:
        raise ValueError(f"saliency grids differ: {a.shape} vs {b.shape}")
    if _is_constant(a) or _is_constant(b):
        return 0.0
    a = a - a.mean()
    b = b - b.mean()
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum()))


def nss(pred: SaliencyMap, gt_fixations: FixationPack) -> float:
    m = pred.grid
    z = np.zeros_like(m) if _is_constant(m) else (m - m.mean()) / m.std()
    gy, gx = m.shape
    vals = [z[_cell(f, (gx, gy))] for f in gt_fixations]
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class TrialScores:
    trial_id: str
    ss: float
    ss_pack: float
    fed: float
    fed_pack: float
    cc_pack: float | None
    nss_pack: float | None


@dataclass
class MetricsReport:
    ss: float
    ss_pack: float
    fed: float
    fed_pack: float
    cc_pack: float
    nss_pack: float
    n_trials: int
    per_trial: list[TrialScores] = field(default_factory=list)

    def aggregate(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES} | {"n_trials": self.n_trials}

    def to_json(self) -> str:
        doc = {"aggregate": self.aggregate(), "per_trial": [asdict(t) for t in self.per_trial]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def row(self) -> list[str]:
        return [f"{getattr(self, k):.3f}" for k in METRIC_NAMES]


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Plain aligned table with the six metric columns, one row per named report."""
    name_w = max([len(n) for n, _ in rows] + [4])
    col_w = max(len(h) for h in TABLE_HEADERS) + 1
    lines = [" " * name_w + "".join(h.rjust(col_w) for h in TABLE_HEADERS)]
    for name, rep in rows:
        lines.append(name.ljust(name_w) + "".join(v.rjust(col_w) for v in rep.row()))
    return "\n".join(lines) + "\n"


def score_trial(trial_id: str, pred: Scanpath, gt: Scanpath, cfg: MetricConfig = MetricConfig()) -> TrialScores:
    if len(pred.packs) != len(gt.packs):
        raise ValueError(f"trial {trial_id}: {len(pred.packs)} predicted packs vs {len(gt.packs)} ground truth")
    sp, sg = quantize(pred, cfg.grid), quantize(gt, cfg.grid)
    ss_packs, fed_packs, ccs, nsss = [], [], [], []
    for pp, gp in zip(pred.packs, gt.packs):
        a, b = quantize(pp, cfg.grid), quantize(gp, cfg.grid)
        ss_packs.append(sequence_score(a, b))
        fed_packs.append(edit_distance(a, b))
        if len(gp):
            pm = saliency_map(pp, cfg.sigma_px, cfg.saliency_grid, cfg.image_size)
            gm = saliency_map(gp, cfg.sigma_px, cfg.saliency_grid, cfg.image_size)
            ccs.append(cc(pm, gm))
            nsss.append(nss(pm, gp))
    return TrialScores(
        trial_id=trial_id,
        ss=sequence_score(sp, sg),
        ss_pack=float(np.mean(ss_packs)),
        fed=float(edit_distance(sp, sg)),
        fed_pack=float(np.mean(fed_packs)),
        cc_pack=float(np.mean(ccs)) if ccs else None,
        nss_pack=float(np.mean(nsss)) if nsss else None,
    )


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(sum(vals) / len(vals)) if vals else 0.0


def evaluate(preds: Sequence[Scanpath], gts: Sequence[Scanpath], cfg: MetricConfig = MetricConfig(),
             trial_ids: Sequence[str] | None = None, threads: int = 1) -> MetricsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth scanpaths")
    ids = list(trial_ids) if trial_ids is not None else [str(i) for i in range(len(gts))]
    args = list(zip(ids, preds, gts))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda a: score_trial(*a, cfg), args))
    else:
        rows = [score_trial(*a, cfg) for a in args]
    return MetricsReport(
        ss=_mean(r.ss for r in rows),
        ss_pack=_mean(r.ss_pack for r in rows),
        fed=_mean(r.fed for r in rows),
        fed_pack=_mean(r.fed_pack for r in rows),
        cc_pack=_mean(r.cc_pack for r in rows),
        nss_pack=_mean(r.nss_pack for r in rows),
        n_trials=len(rows),
        per_trial=rows,
    )


def random_scanpaths(gts: Sequence[Scanpath], seed: int) -> list[Scanpath]:
    """Uniform fixations with the ground-truth pack lengths."""
    rng = np.random.default_rng(seed)
    out = []
    for gt in gts:
        out.append(Scanpath(tuple(FixationPack.of(rng.uniform(0.0, 1.0, (len(p), 2))) for p in gt.packs)))
    return out
