"""Mask-Predict iterative decoding and a greedy left-to-right baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch

from cmtm.model import CMTM, causal_bias
from cmtm.vocab import EOS, LEN, MASK, SOS, Vocab

# ids never emitted by the decoder; <EOS> is additionally restricted to the
# final slot of a hypothesis so candidate lengths stay fixed.
BANNED_IDS = (0, 1, 3, 4, 5)  # <PAD>, <SOS>, <MASK>, <LEN>, <UNK>

# Mean log-confidence gaps below this are numerical noise: a fully trained
# model on an easy task is saturated (confidence ~1 at every position and
# every candidate length), and the ~1e-5 residuals would pick an arbitrary
# winner. Ties within the tolerance go to the better length-head rank.
SCORE_TIE_EPS = 1e-3


@dataclass
class IterationRecord:
    tokens: List[int]
    confidences: List[float]
    remasked: List[int]


@dataclass
class CandidateTrace:
    length: int
    rank: int  # position among the length candidates, 0 = top logit
    score: float = 0.0  # mean log-confidence
    iterations: List[IterationRecord] = field(default_factory=list)


def select_lengths(length_logits: torch.Tensor, k: int) -> List[int]:
    """Top-k target lengths by logit, descending; ties favor the shorter."""
    length_logits = length_logits.detach()
    n = length_logits.size(-1)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    order = sorted(range(n), key=lambda i: (-float(length_logits[i]), i))
    return [i + 1 for i in order[:k]]


def remask_count(length: int, iterations: int, t: int) -> int:
    """How many lowest-confidence positions round t re-predicts.

    Linear decay: floor(length * (iterations - t) / iterations). Round 1
    re-predicts everything (the hypothesis starts fully masked); the final
    round keeps everything.
    """
    if not 1 <= t <= iterations:
        raise ValueError("t must be in [1, iterations]")
    if t == 1:
        return length
    return (length * (iterations - t)) // iterations


def _allowed_mask(vocab_size: int, length: int) -> torch.Tensor:
    allowed = torch.ones(length, vocab_size, dtype=torch.bool)
    allowed[:, list(BANNED_IDS)] = False
    allowed[:, EOS] = False
    allowed[length - 1, EOS] = True
    return allowed


def _constrained_argmax(probs: torch.Tensor, allowed: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Row-wise argmax over the allowed vocabulary, ties to the lowest id."""
    vocab = probs.size(-1)
    masked = probs.masked_fill(~allowed, -1.0)
    top = masked.max(dim=-1, keepdim=True).values
    ids = torch.arange(vocab)
    pick = torch.where(masked == top, ids, vocab).min(dim=-1).values
    return pick, probs.gather(-1, pick.unsqueeze(-1)).squeeze(-1)


def mask_predict(
    model: CMTM,
    vocab: Vocab,
    src_ids: List[int],
    iterations: int,
    length_beam: int,
    remask_threshold: Optional[float] = None,
    return_hidden: bool = False,
):
    """Iteratively refine an initially all-masked hypothesis.

    For each of length_beam candidate lengths, round 1 predicts every
    position; each later round re-predicts the lowest-confidence positions
    (count-based by default, threshold-based when remask_threshold is set).
    The winner is the candidate with the highest mean log-confidence.

    Returns (token ids without the trailing <EOS>, list of CandidateTrace);
    with return_hidden=True also the winner's final decoder states [L, d].
    """
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    model.eval()
    with torch.no_grad():
        src = torch.tensor([[LEN] + src_ids], dtype=torch.long)
        src_pad = torch.zeros_like(src, dtype=torch.bool)
        h_enc = model.encode(src, src_pad)
        lengths = select_lengths(model.length_logits(h_enc)[0], length_beam)

        best = None
        for rank, length in enumerate(lengths):
            trace = CandidateTrace(length=length, rank=rank)
            tokens = torch.full((length,), MASK, dtype=torch.long)
            conf = torch.zeros(length, dtype=torch.float64)
            allowed = _allowed_mask(len(vocab), length)
            tgt_pad = torch.zeros(1, length, dtype=torch.bool)
            h_dec = None
            for t in range(1, iterations + 1):
                if t == 1:
                    mask_idx = torch.arange(length)
                elif remask_threshold is not None:
                    mask_idx = (conf < remask_threshold).nonzero().squeeze(-1)
                else:
                    n = remask_count(length, iterations, t)
                    mask_idx = torch.argsort(conf, stable=True)[:n]
                if mask_idx.numel() == 0:
                    break
                y_in = tokens.clone()
                y_in[mask_idx] = MASK
                h_dec = model.decode(h_enc, y_in.unsqueeze(0), tgt_pad, src_pad)
                probs = model.token_probs(h_dec)[0]
                pick, pick_conf = _constrained_argmax(probs, allowed)
                tokens[mask_idx] = pick[mask_idx]
                conf[mask_idx] = pick_conf[mask_idx]
                trace.iterations.append(
                    IterationRecord(
                        tokens=tokens.tolist(),
                        confidences=conf.tolist(),
                        remasked=sorted(mask_idx.tolist()),
                    )
                )
            trace.score = float(torch.log(conf).mean())
            if best is None or trace.score > best[0].score + SCORE_TIE_EPS:
                best = (trace, tokens, h_dec)

    win_trace, tokens, h_dec = best
    out = tokens.tolist()
    if out and out[-1] == EOS:
        out = out[:-1]
    if return_hidden:
        return out, win_trace, h_dec[0]
    return out, win_trace


def greedy_ar_decode(model: CMTM, vocab: Vocab, src_ids: List[int], max_len: int) -> List[int]:
    """Left-to-right argmax through the causal path with the W1 token head.

    Stops at <EOS> or max_len. Provided as a latency/quality baseline and
    for generating distillation targets.
    """
    model.eval()
    with torch.no_grad():
        src = torch.tensor([[LEN] + src_ids], dtype=torch.long)
        src_pad = torch.zeros_like(src, dtype=torch.bool)
        h_enc = model.encode(src, src_pad)
        seq = [SOS]
        out: List[int] = []
        for _ in range(max_len):
            y = torch.tensor([seq], dtype=torch.long)
            h = model.decoder_stack(h_enc, y, causal_bias(len(seq)), src_pad)
            logits = model.token_logits(h)[0, -1].clone()
            logits[list(BANNED_IDS)] = -math.inf
            nxt = int(logits.argmax())
            if nxt == EOS:
                break
            out.append(nxt)
            seq.append(nxt)
    return out
