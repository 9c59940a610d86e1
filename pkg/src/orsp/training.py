"""Three-term loss, AdamW with decoupled decay, warmup + cosine schedule, epoch loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .domain import ModelConfig, Trial
from .model import ForwardOut, TrialTensors, forward, init_params, trial_tensors
from .numerics import Node, ParamStore, Tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LossBreakdown:
    l_txt: float
    l_xy: float
    l_token: float
    l_total: float


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 3e-4
    lr_min: float = 1e-6
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_accum: int = 8
    batch_size: int = 1
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.grad_accum < 1 or self.batch_size != 1:
            raise ValueError("grad_accum must be >= 1 and batch_size is fixed at 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in [0, 1)")

    def schedule(self, n_trials: int) -> "Schedule":
        per_epoch = math.ceil(n_trials / self.grad_accum) if n_trials else 0
        total = max(self.epochs * per_epoch, 1)
        warmup = min(int(round(self.warmup_frac * total)), total - 1)
        return Schedule(self.lr0, self.lr_min, warmup, total)


@dataclass(frozen=True)
class Schedule:
    lr0: float
    lr_min: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup from 0.1*lr0 to lr0, then cosine decay to lr_min."""
    if step >= sched.total_steps:
        return sched.lr_min
    if step < sched.warmup_steps:
        frac = step / sched.warmup_steps
        return sched.lr0 * (0.1 + 0.9 * frac)
    t = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.lr_min + 0.5 * (sched.lr0 - sched.lr_min) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- losses

def loss_txt(logits: Node, targets: Sequence[int]) -> Node:
    return nx.softmax_cross_entropy(logits, targets)


def loss_xy(X: Node, Y: Node, coords: np.ndarray, validity: np.ndarray, use_l2: bool = False) -> Node:
    """Masked L1 (or squared) coordinate error averaged over valid ground-truth slots."""
    tape = X.tape
    n_valid = float(validity.sum())
    if n_valid == 0:
        return tape.const(0.0)
    mask = tape.const(validity)
    err = nx.square if use_l2 else nx.abs_
    dx = err(nx.sub(X, tape.const(coords[..., 0])))
    dy = err(nx.sub(Y, tape.const(coords[..., 1])))
    total = nx.add(nx.sum_(nx.mul(dx, mask)), nx.sum_(nx.mul(dy, mask)))
    return nx.scale(total, 1.0 / n_valid)


def focal(p: float, y: int, alpha: float, gamma: float) -> float:
    return float(nx.focal_values(np.asarray(p, dtype=np.float64), np.asarray(y), alpha, gamma))


def loss_token(V: Node, validity: np.ndarray, alpha: float, gamma: float) -> Node:
    """Mean focal loss over every slot, PAD slots included with target 0."""
    return nx.mean(nx.focal(V, validity, alpha, gamma))


@dataclass
class LossNodes:
    l_txt: Node
    l_xy: Node
    l_token: Node
    l_total: Node

    def values(self) -> LossBreakdown:
        return LossBreakdown(float(self.l_txt.value), float(self.l_xy.value),
                             float(self.l_token.value), float(self.l_total.value))


def trial_loss(tape: Tape, tt: TrialTensors, cfg: ModelConfig) -> tuple[LossNodes, ForwardOut]:
    out = forward(tape, tt, cfg)
    if cfg.no_txt_loss:
        l_txt = tape.const(0.0)
    else:
        l_txt = loss_txt(out.logits, tt.next_tokens)
    l_xy = loss_xy(out.X, out.Y, tt.coords, tt.validity, cfg.use_l2_xy)
    l_token = loss_token(out.V, tt.validity, cfg.focal_alpha, cfg.focal_gamma)
    total = _add_scalars(_add_scalars(l_txt, l_xy), l_token)
    return LossNodes(l_txt, l_xy, l_token, total), out


def _add_scalars(a: Node, b: Node) -> Node:
    # constants (disabled terms) carry no tape entry but still add exactly
    if not a.requires_grad and not b.requires_grad:
        return a.tape.const(a.value + b.value)
    if not a.requires_grad:
        a, b = b, a
    if not b.requires_grad:
        c = float(b.value)
        return a.tape.record(a.value + c, "add_const", (a,), lambda g: nx._accum(a, g))
    return nx.add(a, b)


# ---------------------------------------------------------------- optimizer

def adamw_step(store: ParamStore, lr: float, cfg: TrainConfig, step: int) -> None:
    """One AdamW update from ``store.grads``; ``step`` counts from 1."""
    b1, b2 = cfg.betas
    bc1 = 1.0 - b1 ** step
    bc2 = 1.0 - b2 ** step
    for name, p in store.values.items():
        g = store.grads[name]
        st = store.state.setdefault(name, {"m": np.zeros_like(p), "v": np.zeros_like(p)})
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        if cfg.weight_decay:
            p *= 1.0 - lr * cfg.weight_decay
        p -= lr * (st["m"] / bc1) / (np.sqrt(st["v"] / bc2) + cfg.eps)


# ---------------------------------------------------------------- evaluation helpers

@dataclass
class ValStats:
    l_xy: float
    l_token: float
    l_txt: float
    slot_accuracy: float


def teacher_forced_stats(store: ParamStore, tts: Sequence[TrialTensors], cfg: ModelConfig) -> ValStats:
    if not tts:
        return ValStats(0.0, 0.0, 0.0, 0.0)
    xy = tok = txt = 0.0
    correct = total = 0
    for tt in tts:
        losses, out = trial_loss(Tape(store, grad=False), tt, cfg)
        xy += float(losses.l_xy.value)
        tok += float(losses.l_token.value)
        txt += float(losses.l_txt.value)
        pred = out.V.value >= cfg.decode_threshold
        correct += int((pred == (tt.validity > 0.5)).sum())
        total += tt.validity.size
    n = len(tts)
    return ValStats(xy / n, tok / n, txt / n, correct / total)


# ---------------------------------------------------------------- loop

@dataclass
class TrainResult:
    store: ParamStore
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    n_steps: int = 0


def train(trials: Sequence[Trial], model_cfg: ModelConfig, cfg: TrainConfig,
          val_trials: Sequence[Trial] = (), store: ParamStore | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Teacher-forced training; one optimizer step per ``grad_accum`` trials.

    A partial accumulation at the end of an epoch is flushed, averaged over the
    trials it actually holds.
    """
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng = np.random.default_rng(ss.spawn(1)[0])
    if store is None:
        store = init_params(model_cfg, cfg.seed)
    tts = [trial_tensors(t, model_cfg.L_p) for t in trials]
    val_tts = [trial_tensors(t, model_cfg.L_p) for t in val_trials]
    sched = cfg.schedule(len(tts))
    result = TrainResult(store)

    def record_epoch(epoch: int) -> None:
        row = {"epoch": epoch}
        if val_tts:
            row.update({f"val_{k}": v for k, v in asdict(teacher_forced_stats(store, val_tts, model_cfg)).items()})
        result.epochs.append(row)
        if on_epoch:
            on_epoch(row)

    record_epoch(0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(tts))
        store.zero_grad()
        acc: list[LossBreakdown] = []
        for pos, idx in enumerate(order):
            tape = Tape(store)
            try:
                losses, _ = trial_loss(tape, tts[idx], model_cfg)
                lb = losses.values()
                _check_finite(lb, trials[idx].trial_id)
                tape.backward(losses.l_total)
            except nx.NonFiniteError as exc:
                raise TrainingError(f"trial {trials[idx].trial_id} at step {step}: {exc}") from exc
            acc.append(lb)
            if len(acc) == cfg.grad_accum or pos == len(order) - 1:
                lr = lr_at(step, sched)
                for name in store.grads:
                    store.grads[name] /= len(acc)
                step += 1
                adamw_step(store, lr, cfg, step)
                store.zero_grad()
                result.steps.append({
                    "epoch": epoch, "step": step,
                    "l_txt": float(np.mean([a.l_txt for a in acc])),
                    "l_xy": float(np.mean([a.l_xy for a in acc])),
                    "l_token": float(np.mean([a.l_token for a in acc])),
                    "l_total": float(np.mean([a.l_total for a in acc])),
                    "lr": lr,
                })
                acc = []
        log.info("epoch %d done, step %d, last l_total %.4f", epoch, step,
                 result.steps[-1]["l_total"] if result.steps else float("nan"))
        record_epoch(epoch)
    result.n_steps = step
    return result


def _check_finite(lb: LossBreakdown, trial_id: str) -> None:
    for name in ("l_txt", "l_xy", "l_token", "l_total"):
        if not math.isfinite(getattr(lb, name)):
            raise TrainingError(f"non-finite {name} on trial {trial_id}")


LOSS_CSV_FIELDS = ("epoch", "step", "l_txt", "l_xy", "l_token", "l_total", "lr")


def write_loss_csv(steps: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in steps:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in LOSS_CSV_FIELDS})
