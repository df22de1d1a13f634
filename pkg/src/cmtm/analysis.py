"""Evaluation instruments: BLEU, repetition rate, cosine maps, FLOPs accounting."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch


@dataclass
class MetricsRecord:
    name: str
    value: float
    context: Dict[str, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# BLEU

def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    references: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    max_ngram: int = 4,
    smooth: bool = False,
) -> float:
    """Corpus-level BLEU in [0, 100].

    Geometric mean of modified n-gram precisions times the brevity penalty.
    Unsmoothed by default: a zero precision at any order gives 0. With
    smooth=True, orders >= 2 get add-one smoothing on both counts.
    """
    if len(references) != len(hypotheses):
        raise ValueError("reference and hypothesis counts differ")
    if not references:
        raise ValueError("empty reference set")
    matched = [0] * max_ngram
    total = [0] * max_ngram
    ref_len = hyp_len = 0
    for ref, hyp in zip(references, hypotheses):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for n in range(1, max_ngram + 1):
            hyp_ngrams = _ngrams(hyp, n)
            ref_ngrams = _ngrams(ref, n)
            total[n - 1] += sum(hyp_ngrams.values())
            matched[n - 1] += sum(
                min(c, ref_ngrams[g]) for g, c in hyp_ngrams.items()
            )
    if hyp_len == 0:
        return 0.0
    log_precisions = []
    for n in range(1, max_ngram + 1):
        m, t = matched[n - 1], total[n - 1]
        if t == 0:
            continue  # no n-grams of this order exist; order drops out
        if smooth and n >= 2:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_precisions.append(math.log(m / t))
    if not log_precisions:
        return 0.0
    brevity = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * brevity * math.exp(sum(log_precisions) / len(log_precisions))


# ---------------------------------------------------------------------------
# Repetition

def repetition_rate(hypotheses: Sequence[Sequence[str]]) -> float:
    """Percentage of tokens that repeat their immediate predecessor.

    Denominator is the total token count across the corpus.
    """
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    repeats = sum(
        sum(1 for i in range(1, len(h)) if h[i] == h[i - 1]) for h in hypotheses
    )
    tokens = sum(len(h) for h in hypotheses)
    return 100.0 * repeats / tokens if tokens else 0.0


# ---------------------------------------------------------------------------
# Hidden-state cosine maps

def cosine_map(hidden: torch.Tensor) -> Tuple[np.ndarray, List[int]]:
    """Pairwise cosine similarity of final-layer decoder states [T, d].

    Returns the [T, T] matrix and the indices of any zero-norm rows, whose
    similarities are defined as 0 (diagonal included).
    """
    h = hidden.detach().to(torch.float64).numpy()
    norms = np.linalg.norm(h, axis=1)
    flagged = [int(i) for i in np.nonzero(norms == 0)[0]]
    safe = np.where(norms == 0, 1.0, norms)
    unit = h / safe[:, None]
    mat = unit @ unit.T
    for i in flagged:
        mat[i, :] = 0.0
        mat[:, i] = 0.0
    np.fill_diagonal(mat, np.where(norms == 0, 0.0, 1.0))
    return mat, flagged


def decode_cosine_map(model, vocab, src_tokens, iterations: int, length_beam: int):
    """Cosine map of the winning hypothesis' final decode iteration."""
    from cmtm.decoding import mask_predict

    out, trace, hidden = mask_predict(
        model, vocab, vocab.encode(src_tokens), iterations, length_beam,
        return_hidden=True,
    )
    mat, flagged = cosine_map(hidden)
    return out, mat, flagged


# ---------------------------------------------------------------------------
# Length buckets

def length_bucket_scores(
    references: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    bucket_edges: Sequence[int],
    min_pairs: int = 5,
) -> Dict:
    """Per-bucket corpus BLEU, bucketed by reference length.

    bucket_edges are strictly increasing upper bounds; a final open bucket
    catches everything longer. Buckets holding fewer than min_pairs pairs
    are flagged low-confidence; empty buckets are listed as omitted.
    """
    edges = list(bucket_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bucket edges must be strictly increasing")
    bounds = [(0, edges[0])] + list(zip(edges, edges[1:])) + [(edges[-1], None)]
    buckets: List[Dict] = []
    omitted: List[str] = []
    for lo, hi in bounds:
        label = f"({lo},{hi}]" if hi is not None else f"({lo},inf)"
        pairs = [
            (r, h)
            for r, h in zip(references, hypotheses)
            if len(r) > lo and (hi is None or len(r) <= hi)
        ]
        if not pairs:
            omitted.append(label)
            continue
        refs, hyps = zip(*pairs)
        buckets.append(
            {
                "bucket": label,
                "count": len(pairs),
                "bleu": bleu(refs, hyps),
                "low_confidence": len(pairs) < min_pairs,
            }
        )
    return {"buckets": buckets, "omitted": omitted}


# ---------------------------------------------------------------------------
# Analytic FLOPs

def flops_estimate(cfg, src_len: int, tgt_len: int, module: str,
                   include_normalization: bool = False) -> float:
    """Forward-pass FLOPs for one sequence through one module.

    Counts matrix-multiply work only by default (1 multiply-accumulate =
    2 FLOPs): QKV/output projections, attention score and context products,
    the two feed-forward matmuls, and the module's output head. The
    encoder's source length includes the prepended <LEN> slot. Softmax and
    layer-norm element ops are excluded unless include_normalization is set.
    """
    d, f, v, n = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size, cfg.max_target_len
    s = src_len + 1  # <LEN> slot
    t = tgt_len

    def self_attn(length):
        return 8 * length * d * d + 4 * length * length * d

    def cross_attn(length):
        return 4 * (length + s) * d * d + 4 * length * s * d

    def ffn(length):
        return 4 * length * d * f

    def norm_extras(length, keys, n_norms):
        # softmax: ~3 ops per attention score; layernorm: ~5 ops per element
        return 3 * cfg.heads * length * keys + n_norms * 5 * length * d

    if module == "encoder":
        per_layer = self_attn(s) + ffn(s)
        if include_normalization:
            per_layer += norm_extras(s, s, 2)
        return cfg.layers * per_layer + 2 * d * n
    if module in ("decoder", "reviewer"):
        per_layer = self_attn(t) + cross_attn(t) + ffn(t)
        if include_normalization:
            per_layer += norm_extras(t, t, 2) + norm_extras(t, s, 1) - 5 * t * d
        head = 2 * t * d * v if module == "decoder" else 2 * t * d
        return cfg.layers * per_layer + head
    raise ValueError(f"unknown module: {module!r}")


# ---------------------------------------------------------------------------
# Training-cost comparison

def _read_jsonl(path: str | Path) -> List[dict]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def training_flops_report(
    eval_rows_a: Sequence[dict],
    eval_rows_b: Sequence[dict],
    target_metric: str = "token_accuracy",
    target: float = 0.95,
) -> Dict:
    """Cumulative FLOPs each run needed to first reach the target metric.

    Rows come from the runs' eval logs (step, cum_flops, metrics). The
    ratio is flops_b / flops_a, so values above 1 mean run A reached the
    target more cheaply. If either run never reaches the target the ratio
    is omitted.
    """

    def first_reach(rows):
        for row in rows:
            if row.get(target_metric, 0.0) >= target:
                return {"reached": True, "step": row["step"], "flops": row["cum_flops"]}
        return {"reached": False, "step": None, "flops": None}

    a, b = first_reach(eval_rows_a), first_reach(eval_rows_b)
    ratio: Optional[float] = None
    if a["reached"] and b["reached"] and a["flops"] > 0:
        ratio = b["flops"] / a["flops"]
    return {
        "target_metric": target_metric,
        "target": target,
        "run_a": a,
        "run_b": b,
        "ratio": ratio,
    }


def run_flops_report(run_dir_a: str | Path, run_dir_b: str | Path,
                     target_metric: str = "token_accuracy", target: float = 0.95) -> Dict:
    """training_flops_report over two run directories' eval logs."""
    a = _read_jsonl(Path(run_dir_a) / "eval.jsonl")
    b = _read_jsonl(Path(run_dir_b) / "eval.jsonl")
    return training_flops_report(a, b, target_metric, target)
