"""Command-line entry point: train / decode / eval / analyze / compare / flops."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from cmtm import analysis, corpus, decoding, training
from cmtm.config import RunConfig, load_config, save_config
from cmtm.vocab import build_vocab

logger = logging.getLogger(__name__)


def _config_help() -> str:
    lines = ["config file keys (key=value, one per line):"]
    for f in dataclasses.fields(RunConfig):
        lines.append(f"  {f.name} (default: {f.default})")
    return "\n".join(lines)


def prepare_data(cfg: RunConfig) -> Tuple[List, List]:
    """Deterministic train/dev split for the configured data source."""
    if cfg.task == "file":
        if cfg.data_tsv:
            pairs = corpus.load_tsv(cfg.data_tsv)
        else:
            pairs = corpus.load_parallel(cfg.data_src, cfg.data_tgt)
    else:
        pairs = corpus.generate_synthetic(
            cfg.task, cfg.train_size + cfg.dev_size, cfg.max_len, cfg.seed
        )
    if cfg.dev_size >= len(pairs):
        raise ValueError("dev_size must be smaller than the corpus")
    return pairs[: len(pairs) - cfg.dev_size], pairs[len(pairs) - cfg.dev_size :]


def latest_checkpoint(run_dir: Path) -> Path:
    ckpts = sorted(
        (run_dir / "checkpoints").glob("step_*.pt"),
        key=lambda p: int(p.stem.split("_")[1]),
    )
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


# ---------------------------------------------------------------------------
# Subcommands

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.ablate_review:
        cfg.weight_rev = 0.0
    train_pairs, dev_pairs = prepare_data(cfg)
    vocab = build_vocab(train_pairs, cfg.min_count)
    run_dir = Path(args.output_dir) / cfg.run_dir_name()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run_dir / "config.txt")
    if args.ablate_review:
        (run_dir / "tag.txt").write_text("cmtm-only\n")
    logger.info("training into %s (vocab %d, %d train pairs)", run_dir, len(vocab), len(train_pairs))
    state = training.train(cfg, train_pairs, dev_pairs, vocab, run_dir, resume=args.resume)
    print(f"finished at step {state.step}, cumulative FLOPs {state.cum_flops:.3e}")
    print(f"run directory: {run_dir}")
    return 0


def _read_token_lines(path: str) -> List[List[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def cmd_decode(args) -> int:
    model, vocab, blob = training.load_checkpoint(args.checkpoint)
    sources = _read_token_lines(args.input)
    hyps = []
    trace_fh = open(args.trace, "w") if args.trace else None
    try:
        for src in sources:
            if args.ar:
                out = decoding.greedy_ar_decode(
                    model, vocab, vocab.encode(src), model.cfg.max_target_len
                )
            elif args.trace:
                out, trace = decoding.mask_predict(
                    model, vocab, vocab.encode(src), args.iterations,
                    args.length_beam, remask_threshold=args.remask_threshold,
                )
                trace_fh.write(json.dumps(dataclasses.asdict(trace)) + "\n")
            else:
                out, _ = decoding.mask_predict(
                    model, vocab, vocab.encode(src), args.iterations,
                    args.length_beam, remask_threshold=args.remask_threshold,
                )
            hyps.append(" ".join(vocab.decode(out)))
    finally:
        if trace_fh:
            trace_fh.close()
    text = "\n".join(hyps) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval(args) -> int:
    hyps = _read_token_lines(args.hyp)
    if args.metric == "repetition":
        print(f"repetition_rate = {analysis.repetition_rate(hyps):.2f}")
        return 0
    refs = _read_token_lines(args.ref)
    if args.metric == "bleu":
        score = analysis.bleu(refs, hyps, smooth=args.smooth)
        print(f"BLEU = {score:.2f}")
    elif args.metric == "exact":
        if len(refs) != len(hyps):
            raise ValueError("reference and hypothesis counts differ")
        em = sum(r == h for r, h in zip(refs, hyps)) / len(refs)
        print(f"exact_match = {em:.4f}")
    return 0


def _flops_table(cfg: RunConfig, vocab_size: int, src_len: int, tgt_len: int) -> str:
    mcfg = cfg.model_config(vocab_size)
    rows = ["module      FLOPs"]
    for module in ("encoder", "decoder", "reviewer"):
        flops = analysis.flops_estimate(mcfg, src_len, tgt_len, module)
        rows.append(f"{module:<10} {flops / 1e6:10.1f}M")
    full = sum(
        analysis.flops_estimate(mcfg, src_len, tgt_len, m)
        for m in ("encoder", "decoder", "reviewer")
    )
    ablated = full - analysis.flops_estimate(mcfg, src_len, tgt_len, "reviewer")
    rows.append(f"{'cmtm-only':<10} {ablated / 1e6:10.1f}M")
    rows.append(f"{'full':<10} {full / 1e6:10.1f}M")
    rows.append("(forward pass, 1 multiply-accumulate = 2 FLOPs)")
    return "\n".join(rows)


def cmd_analyze(args) -> int:
    if args.what == "flops":
        cfg = load_config(args.config)
        train_pairs, _ = prepare_data(cfg)
        vocab = build_vocab(train_pairs, cfg.min_count)
        src_len = args.src_len or cfg.max_len
        tgt_len = args.tgt_len or cfg.max_len + 1
        print(_flops_table(cfg, len(vocab), src_len, tgt_len))
        return 0
    if args.what == "cosine":
        model, vocab, _ = training.load_checkpoint(args.checkpoint)
        sources = _read_token_lines(args.input)
        with open(args.output, "w") as fh:
            for src in sources:
                out, mat, flagged = analysis.decode_cosine_map(
                    model, vocab, src, args.iterations, args.length_beam
                )
                fh.write("# " + " ".join(vocab.decode(out)) + "\n")
                if flagged:
                    fh.write(f"# zero-norm rows: {flagged}\n")
                for row in mat:
                    fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
                fh.write("\n")
        print(f"wrote cosine maps for {len(sources)} sentences to {args.output}")
        return 0
    if args.what == "buckets":
        refs = _read_token_lines(args.ref)
        hyps = _read_token_lines(args.hyp)
        edges = [int(e) for e in args.edges.split(",")]
        report = analysis.length_bucket_scores(refs, hyps, edges)
        for b in report["buckets"]:
            flag = " (low confidence)" if b["low_confidence"] else ""
            print(f"{b['bucket']:>12}  n={b['count']:<5d} BLEU = {b['bleu']:.2f}{flag}")
        for label in report["omitted"]:
            print(f"{label:>12}  empty (omitted)")
        return 0
    raise ValueError(f"unknown analyze target: {args.what}")


def _decode_dev_metrics(run_dir: Path) -> dict:
    cfg = load_config(run_dir / "config.txt")
    _, dev_pairs = prepare_data(cfg)
    dev = dev_pairs[: cfg.eval_size]
    model, vocab, _ = training.load_checkpoint(latest_checkpoint(run_dir))
    hyps, refs = [], []
    for src, tgt in dev:
        out, _ = decoding.mask_predict(
            model, vocab, vocab.encode(src), cfg.iterations, cfg.length_beam,
            remask_threshold=cfg.remask_threshold,
        )
        hyps.append(vocab.decode(out))
        refs.append(list(tgt))
    tok_total = sum(len(r) for r in refs)
    tok_hit = sum(sum(a == b for a, b in zip(h, r)) for h, r in zip(hyps, refs))
    return {
        "bleu": analysis.bleu(refs, hyps),
        "token_accuracy": tok_hit / max(tok_total, 1),
        "exact_match": sum(h == r for h, r in zip(hyps, refs)) / len(refs),
        "repetition_rate": analysis.repetition_rate(hyps),
    }


def cmd_compare(args) -> int:
    run_a, run_b = Path(args.run_a), Path(args.run_b)
    for run in (run_a, run_b):
        for name in ("metrics.jsonl", "eval.jsonl", "config.txt"):
            if not (run / name).exists():
                raise FileNotFoundError(f"incomplete run: missing {run / name}")
    report = analysis.run_flops_report(run_a, run_b, args.target_metric, args.target)
    print(f"target: {args.target_metric} >= {args.target}")
    for label, side in (("run_a", report["run_a"]), ("run_b", report["run_b"])):
        if side["reached"]:
            print(f"{label}: reached at step {side['step']}, cum FLOPs {side['flops']:.3e}")
        else:
            print(f"{label}: target not reached")
    if report["ratio"] is not None:
        print(f"FLOPs ratio (run_b / run_a): {report['ratio']:.2f}x")
    else:
        print("FLOPs ratio: omitted (target unreached)")
    metrics_a = _decode_dev_metrics(run_a)
    metrics_b = _decode_dev_metrics(run_b)
    for key in ("bleu", "token_accuracy", "exact_match", "repetition_rate"):
        delta = metrics_a[key] - metrics_b[key]
        print(f"{key}: run_a {metrics_a[key]:.4f}  run_b {metrics_b[key]:.4f}  delta {delta:+.4f}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmtm",
        description="Masked translation model with a self-review discriminator.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default="runs")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--ablate-review", action="store_true",
                   help="force the review loss weight to 0 (cmtm-only run)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="translate a file of tokenized sentences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--iterations", type=int, default=4)
    p.add_argument("--length-beam", type=int, default=3)
    p.add_argument("--remask-threshold", type=float, default=None)
    p.add_argument("--trace", default=None, help="write per-iteration traces here")
    p.add_argument("--ar", action="store_true", help="greedy left-to-right baseline")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score hypothesis files")
    p.add_argument("metric", choices=["bleu", "repetition", "exact"])
    p.add_argument("--ref", default=None)
    p.add_argument("--hyp", required=True)
    p.add_argument("--smooth", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="flops tables, cosine maps, length buckets")
    p.add_argument("what", choices=["flops", "cosine", "buckets"])
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input", default=None)
    p.add_argument("--output", default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--hyp", default=None)
    p.add_argument("--edges", default="5,10,20")
    p.add_argument("--src-len", type=int, default=None)
    p.add_argument("--tgt-len", type=int, default=None)
    p.add_argument("--iterations", type=int, default=4)
    p.add_argument("--length-beam", type=int, default=3)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="paired report over two run directories")
    p.add_argument("run_a")
    p.add_argument("run_b")
    p.add_argument("--target-metric", default="token_accuracy")
    p.add_argument("--target", type=float, default=0.95)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("flops", help="alias for 'analyze flops'")
    p.add_argument("--config", required=True)
    p.add_argument("--src-len", type=int, default=None)
    p.add_argument("--tgt-len", type=int, default=None)
    p.set_defaults(func=cmd_analyze, what="flops")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
