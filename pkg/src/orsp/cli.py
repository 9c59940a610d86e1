"""Command-line entry point: ``orsp <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 grad-check failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import data as D
from .domain import ABLATIONS, ModelConfig, with_ablation
from .hesd import predict_scanpath
from .metrics import METRIC_NAMES, MetricConfig, evaluate, format_table, random_scanpaths
from .numerics import grad_check
from .render import render
from .training import TrainConfig, train, write_loss_csv

log = logging.getLogger("orsp")

EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 1, 2, 3

# smaller-is-better metrics, for the informational ablation comparison
LOWER_IS_BETTER = {"fed", "fed_pack"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--lp", type=int, default=4, help="max fixations per pack")
    g.add_argument("--threshold", type=float, default=0.5, help="validity decode threshold")
    g.add_argument("--gamma", type=float, default=2.0, help="focal loss gamma")
    g.add_argument("--alpha", type=float, default=0.25, help="focal loss alpha")
    g.add_argument("--d-ctx", type=int, default=128)
    g.add_argument("--d-img", type=int, default=64)
    g.add_argument("--d-emb", type=int, default=64)
    g.add_argument("--d-hist", type=int, default=64)
    g.add_argument("--d-mlp", type=int, default=128)
    g.add_argument("--ablation", default="full", choices=sorted(ABLATIONS))


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--lr0", type=float, default=3e-4)
    g.add_argument("--lr-min", type=float, default=1e-6)
    g.add_argument("--warmup-frac", type=float, default=0.05)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--grad-accum", type=int, default=8)


def _metric_flags(p):
    g = p.add_argument_group("metrics")
    g.add_argument("--grid", type=int, nargs=2, metavar=("GX", "GY"), default=[8, 6])
    g.add_argument("--sigma-px", type=float, default=16.0)
    g.add_argument("--threads", type=int, default=1)


def build_parser() -> Parser:
    p = Parser(prog="orsp", description="Gaze scanpath prediction for referring expressions")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("gen-data", help="generate a synthetic JSONL dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--n-trials", type=int, default=500)
    s.add_argument("--image-dir", default=None, help="write rasters as .npy files here instead of inline")

    s = sub.add_parser("train", help="train a model; writes checkpoint and loss CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, required=True)
    _model_flags(s)
    _train_flags(s)

    s = sub.add_parser("eval", help="score predictions (from --ckpt or --pred) against the dataset")
    s.add_argument("--data", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--pred", help="JSONL of predicted scanpaths keyed by trial_id")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, required=True, help="seed of the random-scanpath baseline row")
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    _metric_flags(s)

    s = sub.add_parser("predict", help="write predicted scanpaths as JSONL")
    s.add_argument("--data", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--threshold", type=float, default=None, help="override the checkpoint's threshold")
    s.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("ablate", help="train and evaluate every ablation under one seed")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, required=True)
    _model_flags(s)
    _train_flags(s)
    _metric_flags(s)

    s = sub.add_parser("render", help="SVG overlay of one trial")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trial", default=None, help="trial id (default: first trial)")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--ckpt")
    src.add_argument("--pred")

    s = sub.add_parser("grad-check", help="finite-difference check of every parameter gradient")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--eps", type=float, default=1e-4)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-elements", type=int, default=64)
    s.add_argument("--lp", type=int, default=4)
    s.add_argument("--d-ctx", type=int, default=32)
    s.add_argument("--d-hist", type=int, default=16)
    s.add_argument("--d-mlp", type=int, default=32)
    s.add_argument("--d-img", type=int, default=16)
    s.add_argument("--d-emb", type=int, default=16)
    s.add_argument("--vocab", type=int, default=32)
    return p


# ---------------------------------------------------------------- helpers

def model_config(args, vocab_size: int) -> ModelConfig:
    base = ModelConfig(L_p=args.lp, d_ctx=args.d_ctx, d_img=args.d_img, d_emb=args.d_emb,
                       d_hist=args.d_hist, d_mlp=args.d_mlp, vocab_size=vocab_size,
                       focal_gamma=args.gamma, focal_alpha=args.alpha, decode_threshold=args.threshold)
    return with_ablation(base, args.ablation)


def train_config(args) -> TrainConfig:
    return TrainConfig(lr0=args.lr0, lr_min=args.lr_min, warmup_frac=args.warmup_frac,
                       weight_decay=args.weight_decay, grad_accum=args.grad_accum,
                       epochs=args.epochs, seed=args.seed)


def metric_config(args) -> MetricConfig:
    return MetricConfig(grid=tuple(args.grid), sigma_px=args.sigma_px)


def predict_all(trials, store, cfg, threads: int = 1):
    def one(t):
        return predict_scanpath(t.image, t.expression, store, cfg)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, trials))
    return [one(t) for t in trials]


def _train_one(trials, mcfg, tcfg, vocab, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    tr = D.select_split(trials, "train")
    va = [t for t in trials if t.split == "val"]
    res = train(tr, mcfg, tcfg, val_trials=va,
                on_epoch=lambda row: log.info("epoch %s %s", row["epoch"],
                                              {k: round(v, 5) for k, v in row.items() if k != "epoch"}))
    meta = D.CheckpointMeta(mcfg, tuple(vocab.words), res.n_steps, None,
                            {"train_seed": tcfg.seed, "n_train": len(tr)})
    D.save_checkpoint(res.store, meta, out_dir / "checkpoint.json")
    write_loss_csv(res.steps, out_dir / "loss.csv")
    if res.epochs:
        keys = list(res.epochs[0])
        with open(out_dir / "val.csv", "w") as fh:
            fh.write(",".join(keys) + "\n")
            for row in res.epochs:
                fh.write(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys) + "\n")
    return res


def _write_report(report, out_dir: Path, rows) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "table.txt").write_text(format_table(rows))


# ---------------------------------------------------------------- commands

def run_gen_data(args) -> int:
    trials = D.generate(D.SyntheticConfig(n_trials=args.n_trials, seed=args.seed))
    D.save_jsonl(trials, args.out, image_dir=args.image_dir)
    print(f"wrote {len(trials)} trials to {args.out}")
    return 0


def run_train(args) -> int:
    vocab = D.Vocabulary.default()
    trials = D.load_jsonl(args.data, vocab)
    mcfg, tcfg = model_config(args, len(vocab)), train_config(args)
    out = Path(args.out)
    res = _train_one(trials, mcfg, tcfg, vocab, out)
    print(f"trained {res.n_steps} steps; checkpoint {out / 'checkpoint.json'}")
    return 0


def _load_model(path):
    store, meta = D.load_checkpoint(path)
    vocab = D.Vocabulary(tuple(meta.vocab)) if meta.vocab else D.Vocabulary.default()
    return store, meta.model_config, vocab


def run_eval(args) -> int:
    mcfg_metric = metric_config(args)
    if args.ckpt:
        store, cfg, vocab = _load_model(args.ckpt)
        trials = D.select_split(D.load_jsonl(args.data, vocab), args.split)
        preds = predict_all(trials, store, cfg, args.threads)
    else:
        trials = D.select_split(D.load_jsonl(args.data), args.split)
        by_id = D.load_scanpaths_jsonl(args.pred)
        missing = [t.trial_id for t in trials if t.trial_id not in by_id]
        if missing:
            raise D.DataError(f"{args.pred}: no prediction for trials {missing[:5]}")
        preds = [by_id[t.trial_id] for t in trials]
    gts = [t.gt_scanpath for t in trials]
    ids = [t.trial_id for t in trials]
    report = evaluate(preds, gts, mcfg_metric, ids, args.threads)
    baseline = evaluate(random_scanpaths(gts, args.seed), gts, mcfg_metric, ids, args.threads)
    rows = [("Random", baseline), ("Model" if args.ckpt else "Pred", report)]
    _write_report(report, Path(args.out), rows)
    print(format_table(rows), end="")
    return 0


def run_predict(args) -> int:
    store, cfg, vocab = _load_model(args.ckpt)
    if args.threshold is not None:
        cfg = ModelConfig.from_dict(cfg.to_dict() | {"decode_threshold": args.threshold})
    trials = D.select_split(D.load_jsonl(args.data, vocab), args.split)
    preds = predict_all(trials, store, cfg, args.threads)
    D.save_scanpaths_jsonl([(t.trial_id, t.expression.raw_words, p) for t, p in zip(trials, preds)], args.out)
    print(f"wrote {len(preds)} predicted scanpaths to {args.out}")
    return 0


def run_ablate(args) -> int:
    vocab = D.Vocabulary.default()
    trials = D.load_jsonl(args.data, vocab)
    test = D.select_split(trials, "test")
    gts = [t.gt_scanpath for t in test]
    ids = [t.trial_id for t in test]
    out = Path(args.out)
    tcfg = train_config(args)
    reports = {}
    for name in ABLATIONS:
        args.ablation = name
        mcfg = model_config(args, len(vocab))
        try:
            res = _train_one(trials, mcfg, tcfg, vocab, out / name)
            preds = predict_all(test, res.store, mcfg, args.threads)
            rep = evaluate(preds, gts, metric_config(args), ids, args.threads)
        except Exception as exc:
            raise RuntimeError(f"ablation config {name!r} failed: {exc}") from exc
        _write_report(rep, out / name, [(name, rep)])
        reports[name] = rep
        log.info("ablation %s: %s", name, rep.aggregate())

    notes = []
    full = reports["full"]
    for name, rep in reports.items():
        if name == "full":
            continue
        for m in METRIC_NAMES:
            a, b = getattr(full, m), getattr(rep, m)
            better = a < b if m in LOWER_IS_BETTER else a > b
            notes.append(f"{m}: full {'beats' if better else 'does not beat'} {name} ({a:.3f} vs {b:.3f})")
    table = format_table(list(reports.items()))
    (out / "ablation_table.txt").write_text(table)
    doc = {"configs": {k: v.aggregate() for k, v in reports.items()}, "directional_notes": notes}
    (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(table, end="")
    for line in notes:
        log.info("informational: %s", line)
    return 0


def run_render(args) -> int:
    vocab = D.Vocabulary.default()
    pred = None
    if args.ckpt:
        store, cfg, vocab = _load_model(args.ckpt)
    trials = D.load_jsonl(args.data, vocab)
    if not trials:
        raise D.DataError(f"{args.data}: no trials")
    trial = trials[0] if args.trial is None else next((t for t in trials if t.trial_id == args.trial), None)
    if trial is None:
        raise D.DataError(f"{args.data}: no trial {args.trial!r}")
    if args.ckpt:
        pred = predict_scanpath(trial.image, trial.expression, store, cfg)
    elif args.pred:
        pred = D.load_scanpaths_jsonl(args.pred).get(trial.trial_id)
    render(trial, pred, args.out)
    print(f"wrote {args.out}")
    return 0


def grad_check_configs(args):
    base = ModelConfig(L_p=args.lp, d_ctx=args.d_ctx, d_hist=args.d_hist, d_mlp=args.d_mlp,
                       d_img=args.d_img, d_emb=args.d_emb, vocab_size=args.vocab)
    return {name: with_ablation(base, name) for name in ABLATIONS}


def gradient_report(cfg: ModelConfig, seed: int, eps: float, tol: float, max_elements: int):
    from .model import init_params, trial_tensors
    from .numerics import Tape
    from .training import trial_loss
    trial = D.generate(D.SyntheticConfig(n_trials=1, seed=seed))[0]
    tt = trial_tensors(trial, cfg.L_p)
    store = init_params(cfg, seed)
    return grad_check(lambda tape: trial_loss(tape, tt, cfg)[0].l_total, store, eps, tol, max_elements, seed=seed)


def run_grad_check(args) -> int:
    ok = True
    for name, cfg in grad_check_configs(args).items():
        rep = gradient_report(cfg, args.seed, args.eps, args.tol, args.max_elements)
        print(f"[{name}] max rel err {rep.worst:.3e} over {len(rep.max_rel_err)} tensors: "
              f"{'PASS' if rep.ok else 'FAIL'}")
        for line in rep.lines():
            print("  " + line)
        ok &= rep.ok
    return 0 if ok else EXIT_GRADCHECK


COMMANDS = {
    "gen-data": run_gen_data,
    "train": run_train,
    "eval": run_eval,
    "predict": run_predict,
    "ablate": run_ablate,
    "render": run_render,
    "grad-check": run_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    print("config: " + json.dumps(vars(args), sort_keys=True), flush=True)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"orsp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
