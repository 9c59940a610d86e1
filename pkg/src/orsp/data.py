"""Synthetic scenes, JSONL datasets and checkpoint files.

The synthetic generator draws a few coloured rectangles, one per layout zone,
and a target that the expression ``[the] <colour> <shape> <zone>`` picks out.
The colour word leaves several candidates, the shape word narrows them to two
(a twin in another zone always exists), and only the zone word is unique.
"""
from __future__ import annotations

import base64
import json
import os
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import (IMAGE_H, IMAGE_W, RESERVED_WORDS, UNK_ID, Box, FixationPack, ImageRaster,
                     ModelConfig, ReferringExpression, Scanpath, Trial, validate_trial)
from .numerics import ParamStore


class DataError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


COLORS = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 210, 40),
    "purple": (150, 60, 180),
    "orange": (245, 140, 30),
}
SHAPES = {"square": (88, 88), "wide": (136, 68), "tall": (68, 136)}
# 3 columns x 2 rows of layout zones
ZONES = ("top-left", "top-middle", "top-right", "bottom-left", "bottom-middle", "bottom-right")
FILLER = ("the",)
BACKGROUND = (24, 24, 24)


@dataclass(frozen=True)
class Vocabulary:
    words: tuple[str, ...]

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(RESERVED_WORDS + FILLER + tuple(COLORS) + tuple(SHAPES) + ZONES)

    def __len__(self) -> int:
        return len(self.words)

    def id(self, word: str) -> int:
        try:
            return self.words.index(word)
        except ValueError:
            return UNK_ID

    def encode(self, words: Sequence[str]) -> ReferringExpression:
        return ReferringExpression(tuple(self.id(w) for w in words), tuple(words))


DEFAULT_LENGTH_PROBS = (0.05, 0.35, 0.35, 0.15, 0.07, 0.02, 0.01)


@dataclass(frozen=True)
class SyntheticConfig:
    n_trials: int = 500
    n_objects: tuple[int, int] = (3, 5)
    sigma_fix: float = 0.02
    sigma_center: float = 0.08
    length_probs: tuple[float, ...] = DEFAULT_LENGTH_PROBS
    # chance a pack ignores its word's habitual length and redraws
    length_jitter: float = 0.1
    filler_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.n_objects
        if lo < 2 or hi < lo:
            raise DataError("n_objects needs 2 <= low <= high (a referent needs distractors)")
        if hi > len(ZONES):
            raise DataError(f"at most {len(ZONES)} objects fit the zone layout")
        if abs(sum(self.length_probs) - 1.0) > 1e-9:
            raise DataError("length_probs must sum to 1")


def _zone_box(zone: int) -> tuple[float, float, float, float]:
    col, row = zone % 3, zone // 3
    w, h = IMAGE_W / 3, IMAGE_H / 2
    return col * w, row * h, (col + 1) * w, (row + 1) * h


def _place(rng: np.random.Generator, zone: int, shape: str) -> tuple[int, int, int, int]:
    zx0, zy0, zx1, zy1 = _zone_box(zone)
    bw, bh = SHAPES[shape]
    cx = 0.5 * (zx0 + zx1) + rng.uniform(-12, 12)
    cy = 0.5 * (zy0 + zy1) + rng.uniform(-8, 8)
    x0 = int(round(cx - bw / 2))
    y0 = int(round(cy - bh / 2))
    return x0, y0, x0 + bw, y0 + bh


def _scene(rng: np.random.Generator, cfg: SyntheticConfig):
    """Objects as (color, shape, zone, pixel box); object 0 is the target."""
    k = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    colors, shapes = list(COLORS), list(SHAPES)
    zones = [int(z) for z in rng.permutation(len(ZONES))[:k]]
    t_color = colors[rng.integers(len(colors))]
    t_shape = shapes[rng.integers(len(shapes))]
    objs = [(t_color, t_shape)]
    objs.append((t_color, t_shape))  # twin: only the zone word separates it
    if k >= 3:
        other = [s for s in shapes if s != t_shape]
        objs.append((t_color, other[rng.integers(len(other))]))
    while len(objs) < k:
        objs.append((colors[rng.integers(len(colors))], shapes[rng.integers(len(shapes))]))
    return [(c, s, z, _place(rng, z, s)) for (c, s), z in zip(objs, zones)]


def _render(objects) -> np.ndarray:
    img = np.empty((IMAGE_H, IMAGE_W, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for color, _, _, (x0, y0, x1, y1) in objects:
        img[max(y0, 0):min(y1, IMAGE_H), max(x0, 0):min(x1, IMAGE_W)] = COLORS[color]
    return img


def _center(box) -> tuple[float, float]:
    x0, y0, x1, y1 = box
    return 0.5 * (x0 + x1) / IMAGE_W, 0.5 * (y0 + y1) / IMAGE_H


def _points(rng, centers, n, sigma, start=0) -> FixationPack:
    """``n`` noisy fixations visiting ``centers`` cyclically from index ``start``."""
    pts = []
    for i in range(n):
        cx, cy = centers[(start + i) % len(centers)]
        x = float(np.clip(cx + rng.normal(0.0, sigma), 0.0, 1.0))
        y = float(np.clip(cy + rng.normal(0.0, sigma), 0.0, 1.0))
        pts.append((x, y))
    return FixationPack.of(pts)


def _reading_order(objects) -> list:
    # top row before bottom row, then left to right
    return sorted(objects, key=lambda o: (o[2] // 3, _center(o[3])[0]))


def habitual_lengths(cfg: SyntheticConfig, vocab: Vocabulary) -> np.ndarray:
    """Per-word typical pack length, itself a draw from the configured distribution."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    return rng.choice(len(cfg.length_probs), size=len(vocab), p=cfg.length_probs)


def generate(cfg: SyntheticConfig, vocab: Vocabulary | None = None) -> list[Trial]:
    vocab = vocab or Vocabulary.default()
    habit = habitual_lengths(cfg, vocab)
    streams = np.random.SeedSequence([cfg.seed, 2]).spawn(cfg.n_trials)
    trials = []
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        objects = _scene(rng, cfg)
        t_color, t_shape, t_zone, t_box = objects[0]
        words = (["the"] if rng.random() < cfg.filler_prob else []) + [t_color, t_shape, ZONES[t_zone]]
        matches = [o for o in objects if (o[0], o[1], o[2]) == (t_color, t_shape, t_zone)]
        if len(matches) != 1:
            raise DataError("could not make the expression unique")
        expr = vocab.encode(words)

        ids = expr.with_sentinels()
        packs = []
        target = [_center(t_box)]
        scan_set, scan_pos = None, 0
        for j, tok in enumerate(ids):
            n = int(habit[tok])
            if rng.random() < cfg.length_jitter:
                n = int(rng.choice(len(cfg.length_probs), p=cfg.length_probs))
            if j == 0 or (j <= len(words) and words[j - 1] in FILLER):
                # nothing heard yet that constrains the referent: gaze stays central
                packs.append(_points(rng, [(0.5, 0.5)], n, cfg.sigma_center))
                continue
            if j >= len(words):
                packs.append(_points(rng, target, n, cfg.sigma_fix))
                continue
            # candidates still consistent with the words heard so far, scanned in
            # reading order; the scan carries over packs until the set narrows
            heard = words[:j]
            cands = [_center(o[3]) for o in _reading_order(objects)
                     if all(w not in COLORS or w == o[0] for w in heard)
                     and all(w not in SHAPES or w == o[1] for w in heard)]
            if cands != scan_set:
                scan_set, scan_pos = cands, 0
            packs.append(_points(rng, cands, n, cfg.sigma_fix, scan_pos))
            scan_pos += n

        x0, y0, x1, y1 = t_box
        box = Box(max(x0, 0) / IMAGE_W, max(y0, 0) / IMAGE_H, min(x1, IMAGE_W) / IMAGE_W, min(y1, IMAGE_H) / IMAGE_H)
        trials.append(Trial(
            trial_id=f"syn{cfg.seed}-{i:05d}",
            image=ImageRaster(_render(objects)),
            expression=expr,
            gt_scanpath=Scanpath(tuple(packs)),
            target_box=box,
        ))
    return assign_splits(trials, cfg.seed)


SPLITS = ("train", "val", "test")


def assign_splits(trials: Sequence[Trial], seed: int, fractions=(0.8, 0.1, 0.1)) -> list[Trial]:
    """Seeded 80/10/10 split recorded on each trial."""
    n = len(trials)
    order = np.random.default_rng(np.random.SeedSequence([seed, 3])).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    label = np.empty(n, dtype=object)
    label[order[:n_train]] = "train"
    label[order[n_train:n_train + n_val]] = "val"
    label[order[n_train + n_val:]] = "test"
    return [_with_split(t, str(label[i])) for i, t in enumerate(trials)]


def _with_split(t: Trial, split: str) -> Trial:
    return Trial(t.trial_id, t.image, t.expression, t.gt_scanpath, t.target_box, split)


def select_split(trials: Sequence[Trial], split: str) -> list[Trial]:
    if split == "all":
        return list(trials)
    if all(t.split is None for t in trials):
        return list(trials)
    return [t for t in trials if t.split == split]


# ---------------------------------------------------------------- JSONL

IMAGE_ENCODING = "rgb8-zlib-base64"


def _encode_image(img: ImageRaster) -> dict:
    raw = np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()
    return {"encoding": IMAGE_ENCODING, "height": int(img.shape[0]), "width": int(img.shape[1]),
            "data": base64.b64encode(zlib.compress(raw, 6)).decode("ascii")}


def _decode_image(d: dict) -> ImageRaster:
    if d.get("encoding") != IMAGE_ENCODING:
        raise DataError(f"unsupported image encoding {d.get('encoding')!r}")
    h, w = int(d["height"]), int(d["width"])
    raw = zlib.decompress(base64.b64decode(d["data"]))
    if len(raw) != h * w * 3:
        raise DataError("image payload size does not match its dimensions")
    return ImageRaster(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy())


def trial_record(t: Trial, image_ref: str | None = None) -> dict:
    rec = {"trial_id": t.trial_id}
    if image_ref is None:
        rec["image"] = _encode_image(t.image)
    else:
        rec["image_ref"] = image_ref
    rec["words"] = list(t.expression.raw_words)
    rec["packs"] = scanpath_to_pixels(t.gt_scanpath)
    rec["target_box"] = None if t.target_box is None else [
        t.target_box.x0 * IMAGE_W, t.target_box.y0 * IMAGE_H, t.target_box.x1 * IMAGE_W, t.target_box.y1 * IMAGE_H]
    if t.split is not None:
        rec["split"] = t.split
    return rec


def scanpath_to_pixels(sp: Scanpath) -> list:
    return [[[f.x * IMAGE_W, f.y * IMAGE_H] for f in p] for p in sp.packs]


def scanpath_from_pixels(packs, where: str) -> Scanpath:
    out = []
    for pack in packs:
        pts = []
        for xy in pack:
            if len(xy) != 2:
                raise DataError(f"{where}: fixation must be [x, y]")
            px, py = float(xy[0]), float(xy[1])
            if not (0.0 <= px <= IMAGE_W and 0.0 <= py <= IMAGE_H):
                raise DataError(f"{where}: fixation ({px}, {py}) outside the {IMAGE_W}x{IMAGE_H} image")
            pts.append((px / IMAGE_W, py / IMAGE_H))
        out.append(FixationPack.of(pts))
    return Scanpath(tuple(out))


def save_jsonl(trials: Sequence[Trial], path, image_dir=None) -> None:
    """One trial per line; rasters inline, or as .npy files under ``image_dir``."""
    path = Path(path)
    if image_dir is not None:
        image_dir = Path(image_dir)
        image_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for t in trials:
            ref = None
            if image_dir is not None:
                img_path = image_dir / f"{t.trial_id}.npy"
                np.save(img_path, t.image.pixels, allow_pickle=False)
                ref = os.path.relpath(img_path, path.parent)
            fh.write(json.dumps(trial_record(t, ref), separators=(",", ":")) + "\n")


def load_jsonl(path, vocab: Vocabulary | None = None) -> list[Trial]:
    vocab = vocab or Vocabulary.default()
    path = Path(path)
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                trials.append(_parse_record(rec, vocab, path.parent, where))
            except DataError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{where}: malformed record ({exc})") from exc
    return trials


def _parse_record(rec: dict, vocab: Vocabulary, base: Path, where: str) -> Trial:
    if "image" in rec:
        image = _decode_image(rec["image"])
    elif "image_ref" in rec:
        image = ImageRaster(np.load(base / rec["image_ref"], allow_pickle=False).astype(np.uint8))
    else:
        raise DataError(f"{where}: record has neither image nor image_ref")
    words = [str(w) for w in rec["words"]]
    packs = rec["packs"]
    if len(packs) != len(words) + 2:
        raise DataError(f"{where}: pack count {len(packs)} != {len(words)}+2")
    box = rec.get("target_box")
    trial = Trial(
        trial_id=str(rec["trial_id"]),
        image=image,
        expression=vocab.encode(words),
        gt_scanpath=scanpath_from_pixels(packs, where),
        target_box=None if box is None else Box(box[0] / IMAGE_W, box[1] / IMAGE_H, box[2] / IMAGE_W, box[3] / IMAGE_H),
        split=rec.get("split"),
    )
    problems = validate_trial(trial, len(vocab))
    if problems:
        raise DataError(f"{where}: " + "; ".join(problems))
    return trial


def save_scanpaths_jsonl(items: Sequence[tuple[str, Sequence[str], Scanpath]], path) -> None:
    """Predicted scanpaths: {trial_id, words, packs} per line, pixel coordinates."""
    with open(path, "w") as fh:
        for trial_id, words, sp in items:
            rec = {"trial_id": trial_id, "words": list(words), "packs": scanpath_to_pixels(sp)}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_scanpaths_jsonl(path) -> dict[str, Scanpath]:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                out[str(rec["trial_id"])] = scanpath_from_pixels(rec["packs"], where)
            except DataError:
                raise
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{where}: malformed record ({exc})") from exc
    return out


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    from .model import init_params
    return {k: v.shape for k, v in init_params(cfg, 0).values.items()}


def _tensor_json(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "values": [float(v) for v in a.reshape(-1)]}


def _tensor_from_json(d: dict, name: str) -> np.ndarray:
    shape = tuple(int(s) for s in d["shape"])
    values = np.array(d["values"], dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise CheckpointError(f"tensor {name}: {values.size} values for shape {shape}")
    return values.reshape(shape)


@dataclass
class CheckpointMeta:
    model_config: ModelConfig
    vocab: tuple[str, ...] = ()
    step: int = 0
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(store: ParamStore, meta: CheckpointMeta, path, with_optimizer: bool = True) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": meta.model_config.to_dict(),
        "vocab": list(meta.vocab),
        "step": int(meta.step),
        "rng_state": meta.rng_state,
        "extra": meta.extra,
        "params": {k: _tensor_json(v) for k, v in store.values.items()},
    }
    if with_optimizer and store.state:
        doc["optimizer"] = {k: {slot: _tensor_json(a) for slot, a in st.items()}
                            for k, st in store.state.items()}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path, expected: ModelConfig | None = None) -> tuple[ParamStore, CheckpointMeta]:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    version = doc.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version!r}, expected {CHECKPOINT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(doc["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model_config ({exc})") from exc
    if expected is not None and expected != cfg:
        diff = {k: (v, getattr(cfg, k)) for k, v in expected.to_dict().items() if getattr(cfg, k) != v}
        raise CheckpointError(f"{path}: model config mismatch (expected, found): {diff}")
    shapes = expected_shapes(cfg)
    params = doc.get("params", {})
    if set(params) != set(shapes):
        raise CheckpointError(f"{path}: parameter names do not match the model config")
    store = ParamStore()
    for name in params:
        arr = _tensor_from_json(params[name], name)
        if arr.shape != shapes[name]:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {arr.shape} vs {shapes[name]}")
        store.add(name, arr)
    for name, slots in doc.get("optimizer", {}).items():
        store.state[name] = {slot: _tensor_from_json(d, name) for slot, d in slots.items()}
    meta = CheckpointMeta(cfg, tuple(doc.get("vocab", ())), int(doc.get("step", 0)),
                          doc.get("rng_state"), doc.get("extra", {}))
    return store, meta
