"""Core value types: fixations, packs, scanpaths, trials and model configuration."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

IMAGE_H = 312
IMAGE_W = 520

BOT_ID = 0
EOT_ID = 1
UNK_ID = 2
RESERVED_WORDS = ("<bot>", "<eot>", "<unk>")


@dataclass(frozen=True)
class Fixation:
    x: float
    y: float

    def in_range(self) -> bool:
        return (math.isfinite(self.x) and math.isfinite(self.y)
                and 0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0)


@dataclass(frozen=True)
class FixationPack:
    fixations: tuple[Fixation, ...] = ()

    @classmethod
    def of(cls, points) -> "FixationPack":
        return cls(tuple(Fixation(float(x), float(y)) for x, y in points))

    def __len__(self) -> int:
        return len(self.fixations)

    def __iter__(self):
        return iter(self.fixations)

    def as_array(self) -> np.ndarray:
        return np.array([(f.x, f.y) for f in self.fixations], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class Scanpath:
    packs: tuple[FixationPack, ...]

    def __len__(self) -> int:
        return len(self.packs)

    def fixations(self) -> list[Fixation]:
        return [f for p in self.packs for f in p]

    @property
    def n_fixations(self) -> int:
        return sum(len(p) for p in self.packs)


@dataclass(frozen=True)
class ReferringExpression:
    token_ids: tuple[int, ...]
    raw_words: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.token_ids)

    def with_sentinels(self) -> list[int]:
        return [BOT_ID, *self.token_ids, EOT_ID]

    def prefix(self, k: int) -> "ReferringExpression":
        return ReferringExpression(self.token_ids[:k], self.raw_words[:k])


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """H x W x 3 raster held as 8-bit channels; ``values`` gives floats in [0, 1]."""

    pixels: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.pixels.shape

    @property
    def values(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    def __eq__(self, other) -> bool:
        return isinstance(other, ImageRaster) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in normalized coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))


@dataclass(frozen=True, eq=False)
class Trial:
    trial_id: str
    image: ImageRaster
    expression: ReferringExpression
    gt_scanpath: Scanpath
    target_box: Box | None = None
    split: str | None = None

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trial):
            return NotImplemented
        return (self.trial_id == other.trial_id and self.image == other.image
                and self.expression == other.expression and self.gt_scanpath == other.gt_scanpath
                and self.target_box == other.target_box and self.split == other.split)

    __hash__ = None


@dataclass(frozen=True)
class ModelConfig:
    L_p: int = 4
    d_ctx: int = 128
    d_img: int = 64
    d_emb: int = 64
    d_hist: int = 64
    d_mlp: int = 128
    vocab_size: int = 32
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    decode_threshold: float = 0.5
    no_hesd: bool = False
    early_fusion: bool = False
    no_txt_loss: bool = False
    use_l2_xy: bool = False

    def __post_init__(self):
        problems = []
        if self.L_p < 1:
            problems.append("L_p must be >= 1")
        if not 0.0 < self.decode_threshold < 1.0:
            problems.append("decode_threshold must lie in (0, 1)")
        for name in ("d_ctx", "d_img", "d_emb", "d_hist", "d_mlp"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.vocab_size <= EOT_ID:
            problems.append("vocab_size must cover the BOT/EOT sentinels")
        if self.no_hesd and self.early_fusion:
            problems.append("no_hesd and early_fusion are mutually exclusive")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)


ABLATIONS = {
    "full": {},
    "no_hesd": {"no_hesd": True},
    "no_txt_loss": {"no_txt_loss": True},
    "use_l2_xy": {"use_l2_xy": True},
    "early_fusion": {"early_fusion": True},
}


def with_ablation(cfg: ModelConfig, name: str) -> ModelConfig:
    if name not in ABLATIONS:
        raise ValueError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    d = cfg.to_dict()
    d.update(no_hesd=False, early_fusion=False, no_txt_loss=False, use_l2_xy=False)
    d.update(ABLATIONS[name])
    return ModelConfig(**d)


def validate_trial(trial: Trial, vocab_size: int | None = None) -> list[str]:
    """Every invariant violation of ``trial``; an empty list means it is valid."""
    problems: list[str] = []
    shape = trial.image.shape
    if tuple(shape) != (IMAGE_H, IMAGE_W, 3):
        problems.append(f"image dims {tuple(shape)} != ({IMAGE_H}, {IMAGE_W}, 3)")
    L = len(trial.expression)
    if L < 1:
        problems.append("expression is empty")
    if len(trial.expression.raw_words) != L:
        problems.append(f"raw_words length {len(trial.expression.raw_words)} != token count {L}")
    for i, tok in enumerate(trial.expression.token_ids):
        if tok in (BOT_ID, EOT_ID):
            problems.append(f"token {i} is a BOT/EOT sentinel")
        if tok < 0 or (vocab_size is not None and tok >= vocab_size):
            problems.append(f"token {i} id {tok} outside vocabulary")
    n_packs = len(trial.gt_scanpath.packs)
    if n_packs != L + 2:
        problems.append(f"pack count {n_packs} ≠ {L}+2")
    for j, pack in enumerate(trial.gt_scanpath.packs):
        for i, f in enumerate(pack):
            for axis in ("x", "y"):
                v = getattr(f, axis)
                if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                    problems.append(f"fixation {axis} out of [0,1] (pack {j}, fixation {i}: {v})")
    return problems
