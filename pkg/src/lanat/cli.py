"""Command-line entry points.

    gen     write the synthetic corpus as TSV files
    train   run a training recipe, save checkpoint + loss curve
    eval    decode a split and report CER
    align   dump forced alignments in the frame/label text format
    bench   wall-time comparison of parallel vs step-by-step decoding
    ablate  recipe-by-seed CER grid over all four training recipes

Every command is deterministic given the config document and seed
(benchmark timings excepted). Errors come back as a one-line diagnostic
and a nonzero exit code.
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_model
from .config import RunConfig, load_run_config
from .ctc import ctc_forced_align, format_alignment
from .data import generate_corpus, save_corpus
from .model import LaNat
from .trainer import RECIPES, evaluate, run_schedule

EVAL_HEADER = ("utt_id", "ref", "hyp", "edits", "cer")
LOSS_HEADER = ("stage", "epoch", "loss_name", "value")
BENCH_HEADER = ("L", "nar_ms", "ar_ms", "speedup")
ABLATE_HEADER = ("recipe", "seed", "cer")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _pick_split(cfg: RunConfig, split: str):
    train, test = generate_corpus(cfg.data)
    if split == "train":
        return train
    if split == "test":
        return test
    raise ValueError(f"unknown split {split!r}; use train or test")


def cmd_gen(cfg: RunConfig) -> None:
    train, test = generate_corpus(cfg.data)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_corpus(cfg.out / "train.tsv", train)
    save_corpus(cfg.out / "test.tsv", test)
    print(f"wrote {len(train)} train / {len(test)} test utterances to {cfg.out}")


def cmd_train(cfg: RunConfig, recipe: str) -> None:
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; pick from {sorted(RECIPES)}")
    train, _ = generate_corpus(cfg.data)
    model = LaNat(cfg.model, seed=cfg.seed)
    started = time.perf_counter()
    rows, stages = run_schedule(model, recipe, train, seed=cfg.seed, cfg=cfg.trainer)
    minutes = (time.perf_counter() - started) / 60
    cfg.out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out / "model.ckpt"
    save_model(ckpt, model, stages=stages)
    _write_csv(cfg.out / "loss.csv", LOSS_HEADER, rows)
    final = rows[-1][3] if rows else float("nan")
    print(f"{recipe}: stages {stages}, final loss {final:.4f}, "
          f"{minutes:.1f} min, checkpoint {ckpt}")


def cmd_eval(cfg: RunConfig, ckpt: str, split: str) -> None:
    corpus = _pick_split(cfg, split)
    if not corpus:
        raise ValueError(f"split {split!r} is empty")
    model, _ = load_model(ckpt)
    corpus_cer, rows = evaluate(model, corpus)
    out = cfg.out / f"eval_{split}.csv"
    _write_csv(out, EVAL_HEADER,
               [(uid, ref, hyp, edits, f"{c:.6f}") for uid, ref, hyp, edits, c in rows])
    print(f"{split} CER {corpus_cer:.4f} over {len(rows)} utterances, report {out}")


def cmd_align(cfg: RunConfig, ckpt: str, split: str, utt_id: str | None) -> None:
    corpus = _pick_split(cfg, split)
    model, _ = load_model(ckpt)
    if utt_id is not None:
        wanted = [u for u in corpus if u.uid == utt_id]
        if not wanted:
            raise ValueError(f"no utterance {utt_id!r} in split {split!r}")
        corpus = wanted
    from .autodiff import no_grad
    texts = []
    for utt in corpus:
        with no_grad():
            _, log_probs = model.acoustic_encode(utt.frames)
        path = ctc_forced_align(log_probs.data, utt.tokens)
        texts.append((utt.uid, format_alignment(path)))
    if utt_id is not None:
        print(texts[0][1])
        return
    align_dir = cfg.out / "align"
    align_dir.mkdir(parents=True, exist_ok=True)
    for uid, text in texts:
        (align_dir / f"{uid}.txt").write_text(text + "\n")
    print(f"wrote {len(texts)} alignments to {align_dir}")


def _time_call(fn, warmup: int, repeat: int) -> float:
    """Median wall-clock milliseconds of ``fn`` after ``warmup`` throwaway calls."""
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeat):
        started = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - started) * 1e3)
    return statistics.median(samples)


def cmd_bench(cfg: RunConfig, ckpt: str | None, lengths: list[int],
              warmup: int, repeat: int) -> None:
    if ckpt is not None:
        model, _ = load_model(ckpt)
    else:
        model = LaNat(cfg.model, seed=cfg.seed)
    d_min, d_max = cfg.data.d_min, cfg.data.d_max
    rng = np.random.default_rng(cfg.seed)
    rows = []
    # Push the end-of-sequence score down so the step-by-step decoder runs
    # its full length; a fair comparison times L generation steps, not an
    # early stop that an untrained model happens to pick.
    model.ar_b.data[0] -= 1e9
    try:
        for n_tokens in lengths:
            frames = rng.standard_normal(
                (int(n_tokens * (d_min + d_max) / 2), cfg.data.feat_dim))
            nar_ms = _time_call(lambda: model.decode_nar(frames), warmup, repeat)
            ar_ms = _time_call(lambda: model.decode_ar_baseline(frames, max_len=n_tokens),
                               warmup, repeat)
            rows.append((n_tokens, round(nar_ms, 3), round(ar_ms, 3),
                         round(ar_ms / nar_ms, 3)))
    finally:
        model.ar_b.data[0] += 1e9
    _write_csv(cfg.out / "bench.csv", BENCH_HEADER, rows)
    print(" L | nar_ms | ar_ms | speedup")
    for n_tokens, nar_ms, ar_ms, speedup in rows:
        print(f"{n_tokens:3d} | {nar_ms:8.2f} | {ar_ms:8.2f} | {speedup:6.2f}x")


def cmd_ablate(cfg: RunConfig, n_seeds: int) -> None:
    train, test = generate_corpus(cfg.data)
    rows = []
    means = {}
    for recipe in ("scratch", "step3", "steps13", "steps123"):
        cell = []
        for offset in range(n_seeds):
            seed = cfg.seed + offset
            model = LaNat(cfg.model, seed=seed)
            run_schedule(model, recipe, train, seed=seed, cfg=cfg.trainer)
            corpus_cer, _ = evaluate(model, test)
            cell.append(corpus_cer)
            rows.append((recipe, seed, f"{corpus_cer:.6f}"))
        means[recipe] = sum(cell) / len(cell)
        rows.append((recipe, "mean", f"{means[recipe]:.6f}"))
    _write_csv(cfg.out / "ablate.csv", ABLATE_HEADER, rows)
    for recipe, value in means.items():
        print(f"{recipe:>9}: mean CER {value:.4f} over {n_seeds} seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lanat")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output directory")

    common(sub.add_parser("gen", help="write the synthetic corpus"))

    p = sub.add_parser("train", help="run a training recipe")
    common(p)
    p.add_argument("--recipe", default="steps123", help=f"one of {sorted(RECIPES)}")

    p = sub.add_parser("eval", help="decode a split and report CER")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--split", default="test", help="train or test")

    p = sub.add_parser("align", help="dump forced alignments")
    common(p)
    p.add_argument("--ckpt", required=True, help="model checkpoint")
    p.add_argument("--split", default="test", help="train or test")
    p.add_argument("--utt", help="single utterance id; prints to stdout")

    p = sub.add_parser("bench", help="parallel vs step-by-step decode timing")
    common(p)
    p.add_argument("--ckpt", help="model checkpoint (default: fresh init)")
    p.add_argument("--lengths", default="10,20,30",
                   help="comma-separated token counts")
    p.add_argument("--warmup", type=int, default=3,
                   help="untimed calls before measuring")
    p.add_argument("--repeat", type=int, default=5, help="timed calls per cell")

    p = sub.add_parser("ablate", help="recipe-by-seed CER grid")
    common(p)
    p.add_argument("--seeds", type=int, default=3, help="seeds per recipe")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = Path(args.out)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "train":
            cmd_train(cfg, args.recipe)
        elif args.command == "eval":
            cmd_eval(cfg, args.ckpt, args.split)
        elif args.command == "align":
            cmd_align(cfg, args.ckpt, args.split, args.utt)
        elif args.command == "bench":
            lengths = [int(part) for part in args.lengths.split(",") if part]
            cmd_bench(cfg, args.ckpt, lengths, args.warmup, args.repeat)
        elif args.command == "ablate":
            cmd_ablate(cfg, args.seeds)
    except Exception as err:  # noqa: BLE001 - single-line diagnostics by contract
        message = " ".join(str(err).split())
        print(f"lanat {args.command}: error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
