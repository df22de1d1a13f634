import random

import pytest
import torch

from cmtm.corpus import make_batches, generate_synthetic
from cmtm.model import CMTM, ModelConfig
from cmtm.vocab import build_vocab

# Acceptance criteria register their pass/fail lines here; the terminal
# summary hook prints them even under output capture.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)


def tiny_model(vocab_size=20, seed=0, **overrides):
    """Small randomly initialized model for structural tests."""
    kwargs = dict(
        vocab_size=vocab_size, layers=2, model_dim=32, ffn_dim=64, heads=2,
        max_target_len=16, dropout=0.0,
    )
    kwargs.update(overrides)
    torch.manual_seed(seed)
    return CMTM(ModelConfig(**kwargs))


@pytest.fixture
def toy_setup():
    """(pairs, vocab, batches) over the toy grammar, deterministic."""
    pairs = generate_synthetic("toy_grammar", 60, 12, seed=3)
    vocab = build_vocab(pairs)
    batches, _ = make_batches(pairs, vocab, 200, random.Random(5), max_target_len=16)
    return pairs, vocab, batches
