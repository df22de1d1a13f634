"""Losses, the review stop-gradient boundary, optimizer schedule, train loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import torch
import torch.nn.functional as F

from cmtm.config import RunConfig
from cmtm.corpus import Batch, SentencePair, batch_stream
from cmtm.model import CMTM, ModelConfig
from cmtm.vocab import MASK, Vocab
from cmtm import analysis

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9
REVIEW_PROB_CLAMP = 1e-7


@dataclass
class LossBreakdown:
    l_dec: float
    l_rev: float
    l_len: float
    total: float
    masked_count: int
    reviewed_count: int


def loss_dec(token_logits: torch.Tensor, tgt: torch.Tensor, mask_pos: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """Negative log-likelihood over masked positions only, mean per masked token.

    Computed from logits via log-softmax so small probabilities cannot
    underflow.
    """
    if not mask_pos.any(dim=1).all():
        raise ValueError("every row must have at least one masked position")
    logp = F.log_softmax(token_logits, dim=-1)
    gold = logp.gather(-1, tgt.unsqueeze(-1)).squeeze(-1)
    count = int(mask_pos.sum())
    return -(gold * mask_pos).sum() / count, count


def build_review_input(
    token_logits: torch.Tensor, tgt: torch.Tensor, mask_pos: torch.Tensor,
    sample: bool = False, generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Assemble the reviewed sequence and its keep/replace labels.

    Masked slots carry the model's prediction (argmax, ties to the lowest
    id; or a sampled token when sample=True), observed slots carry gold.
    labels_t = 1 iff y_hat_t equals gold. The result is detached: no
    gradient flows from the review loss back into the token logits.
    """
    logits = token_logits.detach()
    if sample:
        probs = torch.softmax(logits, dim=-1)
        flat = probs.reshape(-1, probs.size(-1))
        pred = torch.multinomial(flat, 1, generator=generator).view(tgt.shape)
    else:
        vocab = logits.size(-1)
        top = logits.max(dim=-1, keepdim=True).values
        ids = torch.arange(vocab)
        # non-finite logits match nothing; clamp so the abort path downstream
        # sees the non-finite loss instead of an embedding index error
        pred = torch.where(logits == top, ids, vocab).min(dim=-1).values.clamp(max=vocab - 1)
    y_hat = torch.where(mask_pos, pred, tgt)
    labels = (y_hat == tgt).to(token_logits.dtype)
    return y_hat, labels


def loss_rev(review_logits: torch.Tensor, labels: torch.Tensor, tgt_pad: torch.Tensor) -> Tuple[torch.Tensor, int]:
    """Binary cross-entropy over all non-pad positions, mean per token."""
    if review_logits.shape != labels.shape:
        raise ValueError("review logits and labels must have the same shape")
    p = torch.sigmoid(review_logits).clamp(REVIEW_PROB_CLAMP, 1 - REVIEW_PROB_CLAMP)
    bce = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p))
    nonpad = ~tgt_pad
    count = int(nonpad.sum())
    return (bce * nonpad).sum() / count, count


def loss_len(length_logits: torch.Tensor, tgt_len: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the true target length (1-based, incl. <EOS>)."""
    n = length_logits.size(-1)
    if (tgt_len < 1).any() or (tgt_len > n).any():
        raise ValueError("target length outside [1, N]")
    return F.cross_entropy(length_logits, tgt_len - 1)


def lr_schedule(step: int, warmup: int, peak: float) -> float:
    """Linear warmup to peak, then inverse-square-root decay. lr(0) = 0."""
    if step <= 0:
        return 0.0
    return peak * min(step / warmup, math.sqrt(warmup / step))


def forward_losses(
    model: CMTM, batch: Batch, weights: Tuple[float, float, float],
    sample_review: bool = False,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """One full forward pass; returns the weighted total loss and components.

    The review pass consumes a detached H_enc and a detached y_hat, so its
    errors reach the shared decoder layers and W2 only. It is skipped
    entirely when its weight is zero.
    """
    w_dec, w_len, w_rev = weights
    src_pad, tgt_pad = batch.src_pad, batch.tgt_pad
    h_enc = model.encode(batch.src, src_pad)
    l_len = loss_len(model.length_logits(h_enc), batch.tgt_len)
    y_in = torch.where(batch.mask_pos, MASK, batch.tgt)
    h_dec = model.decode(h_enc, y_in, tgt_pad, src_pad)
    tok_logits = model.token_logits(h_dec)
    l_dec, masked_count = loss_dec(tok_logits, batch.tgt, batch.mask_pos)

    if w_rev != 0.0:
        y_hat, labels = build_review_input(tok_logits, batch.tgt, batch.mask_pos, sample_review)
        h_rev = model.review(h_enc.detach(), y_hat, tgt_pad, src_pad)
        l_rev, reviewed_count = loss_rev(model.review_logits(h_rev), labels, tgt_pad)
    else:
        l_rev = torch.zeros((), dtype=torch.float64)
        reviewed_count = 0

    total = w_dec * l_dec + w_len * l_len + w_rev * l_rev
    breakdown = LossBreakdown(
        l_dec=l_dec.item(), l_rev=l_rev.item(), l_len=l_len.item(),
        total=total.item(), masked_count=masked_count, reviewed_count=reviewed_count,
    )
    return total, breakdown


def _batch_hash(batch: Batch) -> str:
    h = hashlib.sha1()
    for t in (batch.src, batch.tgt, batch.mask_pos):
        h.update(t.numpy().tobytes())
    return h.hexdigest()[:12]


def train_step(
    model: CMTM, optimizer: torch.optim.Optimizer, batch: Batch, step: int,
    cfg: RunConfig,
) -> LossBreakdown:
    """One forward/backward/Adam update at the scheduled learning rate."""
    lr = lr_schedule(step, cfg.warmup, cfg.peak_lr)
    for group in optimizer.param_groups:
        group["lr"] = lr
    weights = (cfg.weight_dec, cfg.weight_len, cfg.weight_rev)
    total, breakdown = forward_losses(model, batch, weights, cfg.sample_review_input)
    if not math.isfinite(breakdown.total):
        raise RuntimeError(
            f"non-finite loss at step {step}: l_dec={breakdown.l_dec} "
            f"l_rev={breakdown.l_rev} l_len={breakdown.l_len} "
            f"batch={_batch_hash(batch)}"
        )
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return breakdown


# ---------------------------------------------------------------------------
# FLOPs accounting per batch

def step_flops(cfg: ModelConfig, batch: Batch, with_review: bool) -> float:
    """Analytic FLOPs for one optimizer step on this batch.

    Forward counts per module via analysis.flops_estimate; the backward
    pass is charged at 2x forward (3x total), the usual analytic-count
    convention.
    """
    total = 0.0
    for b in range(batch.src.size(0)):
        s = int(batch.src_len[b]) - 1  # flops_estimate adds the <LEN> slot itself
        t = int(batch.tgt_len[b])
        total += analysis.flops_estimate(cfg, s, t, "encoder")
        total += analysis.flops_estimate(cfg, s, t, "decoder")
        if with_review:
            total += analysis.flops_estimate(cfg, s, t, "reviewer")
    return 3.0 * total


# ---------------------------------------------------------------------------
# Checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path, model: CMTM, optimizer: torch.optim.Optimizer,
    run_cfg: RunConfig, vocab: Vocab, step: int, epoch: int, batch_index: int,
    cum_flops: float,
) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "run_config": asdict(run_cfg),
            "model_config": asdict(model.cfg),
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "vocab": model_vocab_tokens(vocab),
            "step": step,
            "epoch": epoch,
            "batch_index": batch_index,
            "cum_flops": cum_flops,
            "torch_rng": torch.get_rng_state(),
        },
        path,
    )


def model_vocab_tokens(vocab: Vocab) -> List[str]:
    return vocab.tokens[6:]  # specials are implicit


def load_checkpoint(path: str | Path):
    """Load a checkpoint into freshly built model/vocab objects."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {blob.get('version')}")
    vocab = Vocab(blob["vocab"])
    model = CMTM(ModelConfig(**blob["model_config"]))
    model.load_state_dict(blob["model"])
    return model, vocab, blob


# ---------------------------------------------------------------------------
# Training loop

@dataclass
class TrainState:
    model: CMTM
    optimizer: torch.optim.Optimizer
    vocab: Vocab
    step: int
    epoch: int
    batch_index: int
    cum_flops: float


def evaluate(
    model: CMTM, vocab: Vocab, pairs: List[SentencePair], iterations: int,
    length_beam: int = 1, remask_threshold: Optional[float] = None,
) -> dict:
    """Dev-set token accuracy and sentence exact-match under Mask-Predict."""
    from cmtm.decoding import mask_predict

    model.eval()
    tok_hit = tok_total = sent_hit = 0
    for src, tgt in pairs:
        out, _ = mask_predict(
            model, vocab, vocab.encode(src), iterations, length_beam,
            remask_threshold=remask_threshold,
        )
        hyp = vocab.decode(out)
        sent_hit += int(hyp == list(tgt))
        tok_total += len(tgt)
        tok_hit += sum(a == b for a, b in zip(hyp, tgt))
    model.train()
    return {
        "token_accuracy": tok_hit / max(tok_total, 1),
        "exact_match": sent_hit / max(len(pairs), 1),
    }


def train(
    cfg: RunConfig,
    train_pairs: List[SentencePair],
    dev_pairs: List[SentencePair],
    vocab: Vocab,
    run_dir: str | Path,
    resume: Optional[str | Path] = None,
) -> TrainState:
    """Run the training loop; emits metrics.jsonl / eval.jsonl / checkpoints.

    Fully deterministic per (config, seed). Metrics rows carry only
    deterministic fields; wall-clock throughput goes to the logger.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(exist_ok=True)
    vocab.save(run_dir / "vocab.txt")

    if resume is not None:
        model, ckpt_vocab, blob = load_checkpoint(resume)
        if ckpt_vocab.tokens != vocab.tokens:
            raise ValueError("checkpoint vocab does not match the corpus vocab")
        saved = blob["run_config"]
        for key, value in asdict(cfg).items():
            if key == "steps":
                continue  # resuming to train longer is allowed
            if saved.get(key) != value:
                raise ValueError(
                    f"resume config mismatch on field {key!r}: "
                    f"checkpoint has {saved.get(key)!r}, config has {value!r}"
                )
        optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
        optimizer.load_state_dict(blob["optimizer"])
        torch.set_rng_state(blob["torch_rng"])
        step, epoch, batch_index = blob["step"], blob["epoch"], blob["batch_index"]
        cum_flops = blob["cum_flops"]
        log_mode = "a"
    else:
        torch.manual_seed(cfg.seed)
        model = CMTM(cfg.model_config(len(vocab)))
        optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
        step, epoch, batch_index, cum_flops = 0, 0, 0, 0.0
        log_mode = "w"

    with_review = cfg.weight_rev != 0.0
    stream = batch_stream(
        train_pairs, vocab, cfg.batch_tokens, cfg.seed, cfg.max_target_len,
        cfg.mask_eos, start_epoch=epoch, start_index=batch_index,
    )

    metrics_path = run_dir / "metrics.jsonl"
    eval_path = run_dir / "eval.jsonl"
    t_start = time.monotonic()
    tokens_done = 0
    model.train()
    with open(metrics_path, log_mode) as mlog, open(eval_path, log_mode) as elog:
        while step < cfg.steps:
            epoch, batch_index, batch = next(stream)
            step += 1
            breakdown = train_step(model, optimizer, batch, step, cfg)
            cum_flops += step_flops(model.cfg, batch, with_review)
            tokens_done += batch.target_tokens()
            row = {
                "step": step,
                "lr": lr_schedule(step, cfg.warmup, cfg.peak_lr),
                "l_dec": breakdown.l_dec,
                "l_rev": breakdown.l_rev,
                "l_len": breakdown.l_len,
                "total": breakdown.total,
                "tokens": batch.target_tokens(),
                "cum_flops": cum_flops,
            }
            mlog.write(json.dumps(row, sort_keys=True) + "\n")

            if cfg.eval_interval and step % cfg.eval_interval == 0:
                dev = dev_pairs[: cfg.eval_size]
                scores = evaluate(model, vocab, dev, cfg.eval_iterations)
                erow = {"step": step, "cum_flops": cum_flops, **scores}
                elog.write(json.dumps(erow, sort_keys=True) + "\n")
                elog.flush()
                elapsed = time.monotonic() - t_start
                logger.info(
                    "step %d loss %.4f acc %.4f em %.4f (%.0f tok/s)",
                    step, breakdown.total, scores["token_accuracy"],
                    scores["exact_match"], tokens_done / max(elapsed, 1e-9),
                )
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
                save_checkpoint(
                    run_dir / "checkpoints" / f"step_{step}.pt", model, optimizer,
                    cfg, vocab, step, epoch, batch_index + 1, cum_flops,
                )

    save_checkpoint(
        run_dir / "checkpoints" / f"step_{step}.pt", model, optimizer,
        cfg, vocab, step, epoch, batch_index + 1, cum_flops,
    )
    return TrainState(model, optimizer, vocab, step, epoch, batch_index + 1, cum_flops)
