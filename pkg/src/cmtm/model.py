"""Transformer encoder, bidirectional decoder, and the weight-tied review path.

The decode path runs the shared decoder layers under a fully bidirectional
self-attention mask; the review path runs the *same* layer storage under a
left-to-right mask with its own scalar output head. All computation is in
float64 so finite-difference oracles and bit-exact checkpoint resume hold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from cmtm.vocab import LEN, SOS

NEG_BIAS = -1e9  # additive attention bias for disallowed keys; exp() underflows to 0


@dataclass
class ModelConfig:
    vocab_size: int
    layers: int = 2
    model_dim: int = 64
    ffn_dim: int = 256
    heads: int = 4
    max_target_len: int = 64  # N: upper bound for length prediction and decoding
    dropout: float = 0.0
    review_mask_mode: str = "inclusive"  # or "shifted"
    init: str = "normal"  # or "uniform"
    init_scale: float = 0.02

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ValueError("model_dim must be divisible by heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.review_mask_mode not in ("inclusive", "shifted"):
            raise ValueError(f"unknown review_mask_mode: {self.review_mask_mode!r}")
        if self.init not in ("normal", "uniform"):
            raise ValueError(f"unknown init: {self.init!r}")


def sinusoidal_positions(n_positions: int, dim: int) -> torch.Tensor:
    """Non-learned sine/cosine position table [n_positions, dim]."""
    pos = torch.arange(n_positions, dtype=torch.float64).unsqueeze(1)
    div = torch.exp(
        torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim)
    )
    table = torch.zeros(n_positions, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)
    return table


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: torch.Tensor, kv: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        """bias: additive attention mask broadcastable to [B, 1, Tq, Tk]."""
        bsz, tq, _ = query.shape
        tk = kv.size(1)

        def split(x, t):
            return x.view(bsz, t, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), tq)
        k = split(self.k_proj(kv), tk)
        v = split(self.v_proj(kv), tk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + bias
        attn = self.dropout(torch.softmax(scores, dim=-1))
        ctx = (attn @ v).transpose(1, 2).reshape(bsz, tq, -1)
        return self.out_proj(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(dim, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, bias):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, bias)))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x


class DecoderLayer(nn.Module):
    """Shared by the decode and review paths; only the self-attention bias differs."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.model_dim, cfg.heads, cfg.dropout)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_dim, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.model_dim)
        self.norm2 = nn.LayerNorm(cfg.model_dim)
        self.norm3 = nn.LayerNorm(cfg.model_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_bias, cross_bias):
        x = self.norm1(x + self.dropout(self.self_attn(x, x, self_bias)))
        x = self.norm2(x + self.dropout(self.cross_attn(x, memory, cross_bias)))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x


def padding_bias(pad_mask: torch.Tensor) -> torch.Tensor:
    """[B, Tk] bool (True = pad) -> additive bias [B, 1, 1, Tk]."""
    return torch.where(
        pad_mask.unsqueeze(1).unsqueeze(2), NEG_BIAS, 0.0
    ).to(torch.float64)


def causal_bias(t: int) -> torch.Tensor:
    """Left-to-right mask: position i may attend to keys j <= i."""
    allow = torch.tril(torch.ones(t, t, dtype=torch.bool))
    return torch.where(allow, 0.0, NEG_BIAS).to(torch.float64)


class CMTM(nn.Module):
    """Conditional masked translation model with a self-review head.

    Heads: token_logits (W1 over the vocab), review_logits (W2, one
    keep/replace score per position), length_logits (N-way classifier fed
    by the <LEN> position's encoder state).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.n_positions = cfg.max_target_len + 2  # room for <LEN> / <SOS> prefixes
        self.register_buffer("positions", sinusoidal_positions(self.n_positions, d))
        self.embed_dropout = nn.Dropout(cfg.dropout)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers))
        self.w1 = nn.Linear(d, cfg.vocab_size, bias=False)
        self.w2 = nn.Linear(d, 1, bias=False)
        self.len_head = nn.Linear(d, cfg.max_target_len, bias=False)
        self.double()
        self.reset_parameters()

    def reset_parameters(self) -> None:
        scale = self.cfg.init_scale
        for name, p in self.named_parameters():
            if "norm" in name:
                if name.endswith("weight"):
                    nn.init.ones_(p)
                else:
                    nn.init.zeros_(p)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            elif self.cfg.init == "normal":
                nn.init.normal_(p, mean=0.0, std=scale)
            else:
                nn.init.uniform_(p, -scale, scale)

    # -- embedding ---------------------------------------------------------

    def embed_sequence(self, ids: torch.Tensor) -> torch.Tensor:
        t = ids.size(1)
        if t > self.n_positions:
            raise ValueError(
                f"sequence length {t} exceeds positional table {self.n_positions}"
            )
        x = self.embed(ids) * math.sqrt(self.cfg.model_dim) + self.positions[:t]
        return self.embed_dropout(x)

    # -- encoder -----------------------------------------------------------

    def encode(self, src: torch.Tensor, src_pad: torch.Tensor) -> torch.Tensor:
        """src: [B, S] with <LEN> at position 0 of every row -> H_enc [B, S, d]."""
        if (src[:, 0] != LEN).any():
            raise ValueError("source rows must start with the <LEN> token")
        x = self.embed_sequence(src)
        bias = padding_bias(src_pad)
        for layer in self.enc_layers:
            x = layer(x, bias)
        return x

    # -- shared decoder stack ---------------------------------------------

    def decoder_stack(
        self,
        h_enc: torch.Tensor,
        y_ids: torch.Tensor,
        self_bias: torch.Tensor,
        src_pad: torch.Tensor,
    ) -> torch.Tensor:
        """Run the shared decoder layers over y_ids with an arbitrary
        self-attention bias. Both decode() and review() go through here."""
        x = self.embed_sequence(y_ids)
        cross_bias = padding_bias(src_pad)
        for layer in self.dec_layers:
            x = layer(x, h_enc, self_bias, cross_bias)
        return x

    def decode(
        self,
        h_enc: torch.Tensor,
        y_in: torch.Tensor,
        tgt_pad: torch.Tensor,
        src_pad: torch.Tensor,
    ) -> torch.Tensor:
        """Bidirectional pass: position t's state predicts the token at t."""
        if y_in.size(1) != tgt_pad.size(1):
            raise ValueError("y_in length does not match the declared target length")
        return self.decoder_stack(h_enc, y_in, padding_bias(tgt_pad), src_pad)

    def review(
        self,
        h_enc: torch.Tensor,
        y_hat: torch.Tensor,
        tgt_pad: torch.Tensor,
        src_pad: torch.Tensor,
    ) -> torch.Tensor:
        """Causal pass over the generated target, on the same layer weights.

        inclusive mode: y_hat is fed unshifted and position t attends to
        positions <= t. shifted mode: input is <SOS>-prepended and truncated,
        so position t conditions only on y_hat_{<t}.
        """
        if y_hat.size(1) != tgt_pad.size(1):
            raise ValueError("y_hat length does not match the declared target length")
        t = y_hat.size(1)
        if self.cfg.review_mask_mode == "shifted":
            sos = torch.full((y_hat.size(0), 1), SOS, dtype=torch.long)
            y_hat = torch.cat([sos, y_hat[:, :-1]], dim=1)
        self_bias = causal_bias(t) + padding_bias(tgt_pad)
        return self.decoder_stack(h_enc, y_hat, self_bias, src_pad)

    # -- output heads ------------------------------------------------------

    def token_logits(self, h_dec: torch.Tensor) -> torch.Tensor:
        return self.w1(h_dec)

    def token_probs(self, h_dec: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.token_logits(h_dec), dim=-1)

    def review_logits(self, h_rev: torch.Tensor) -> torch.Tensor:
        return self.w2(h_rev).squeeze(-1)

    def review_probs(self, h_rev: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.review_logits(h_rev))

    def length_logits(self, h_enc: torch.Tensor) -> torch.Tensor:
        """Logits over target lengths 1..N (index i denotes length i+1)."""
        return self.len_head(h_enc[:, 0])
