"""Conditional masked translation model with a self-review discriminator.

A desk-scale encoder-decoder translation model trained with a masked-token
objective, augmented by a weight-tied causal decoder that learns to classify
each generated token as keep/replace. Includes Mask-Predict iterative
decoding, target-length prediction, and analysis tools (BLEU, repetition
rate, hidden-state cosine maps, analytic FLOPs accounting).
"""

__version__ = "0.1.0"

from cmtm.vocab import Vocab, PAD, SOS, EOS, MASK, LEN, UNK
from cmtm.model import ModelConfig, CMTM

__all__ = [
    "Vocab",
    "PAD",
    "SOS",
    "EOS",
    "MASK",
    "LEN",
    "UNK",
    "ModelConfig",
    "CMTM",
]
