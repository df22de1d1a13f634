"""Synthetic task generation, parallel-corpus loading, mask sampling, batching."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Sequence, Set, Tuple

import torch

from cmtm.vocab import EOS, LEN, PAD, Vocab

logger = logging.getLogger(__name__)

SentencePair = Tuple[List[str], List[str]]

# ---------------------------------------------------------------------------
# Synthetic tasks

COPY_VOCAB = [
    "ant", "bee", "cat", "dog", "eel", "fox", "gnu", "hen", "ibis", "jay",
    "kit", "lark", "mole", "newt", "owl", "pug", "quail", "ram", "seal", "toad",
]

# Toy translation grammar: a closed lexicon per part of speech, a fixed
# token-to-token dictionary, and one local reordering rule (adjective-noun
# pairs are swapped on the target side). The source-to-target mapping is a
# function, so exact-match accuracy against transduce() is well-defined.
_LEXICON = {
    "DET": ["the", "a", "this", "that"],
    "ADJ": ["red", "big", "old", "shiny", "quiet"],
    "NOUN": ["cat", "dog", "ship", "rock", "tree", "bird"],
    "VERB": ["sees", "finds", "lifts", "follows", "guards"],
    "ADV": ["slowly", "often", "nearby"],
    "PREP": ["near", "under", "behind"],
}

_DICTIONARY = {
    "the": "le", "a": "un", "this": "ce", "that": "cet",
    "red": "rouge", "big": "grand", "old": "vieux", "shiny": "brillant",
    "quiet": "calme",
    "cat": "chat", "dog": "chien", "ship": "navire", "rock": "roche",
    "tree": "arbre", "bird": "oiseau",
    "sees": "voit", "finds": "trouve", "lifts": "souleve",
    "follows": "suit", "guards": "garde",
    "slowly": "lentement", "often": "souvent", "nearby": "proche",
    "near": "pres", "under": "sous", "behind": "derriere",
}

_CATEGORY_OF = {w: cat for cat, words in _LEXICON.items() for w in words}

# 40 fixed sentence templates over the part-of-speech categories.
GRAMMAR_RULES: List[Tuple[str, ...]] = [
    ("DET", "NOUN", "VERB"),
    ("DET", "ADJ", "NOUN", "VERB"),
    ("DET", "NOUN", "VERB", "ADV"),
    ("DET", "ADJ", "NOUN", "VERB", "ADV"),
    ("DET", "NOUN", "VERB", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "ADJ", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "NOUN", "ADV"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "NOUN", "ADV"),
    ("DET", "NOUN", "VERB", "DET", "ADJ", "NOUN", "ADV"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN", "ADV"),
    ("DET", "NOUN", "VERB", "PREP", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "PREP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "NOUN", "PREP", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "NOUN", "PREP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "ADJ", "NOUN", "PREP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "NOUN", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN", "PREP", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "NOUN", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "VERB", "DET", "ADJ", "NOUN", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "DET", "ADJ", "NOUN", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "VERB", "ADV", "PREP", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "ADV", "PREP", "DET", "NOUN"),
    ("DET", "NOUN", "VERB", "ADV", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "ADJ", "NOUN", "VERB", "ADV", "PREP", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "ADV", "VERB"),
    ("DET", "ADJ", "NOUN", "ADV", "VERB"),
    ("DET", "NOUN", "ADV", "VERB", "DET", "NOUN"),
    ("DET", "ADJ", "NOUN", "ADV", "VERB", "DET", "ADJ", "NOUN"),
    ("DET", "NOUN", "PREP", "DET", "NOUN", "VERB"),
    ("DET", "ADJ", "NOUN", "PREP", "DET", "NOUN", "VERB"),
    ("DET", "NOUN", "PREP", "DET", "ADJ", "NOUN", "VERB"),
    ("DET", "ADJ", "NOUN", "PREP", "DET", "ADJ", "NOUN", "VERB"),
    ("DET", "NOUN", "PREP", "DET", "NOUN", "VERB", "ADV"),
    ("DET", "ADJ", "NOUN", "PREP", "DET", "NOUN", "VERB", "ADV"),
    ("DET", "NOUN", "PREP", "DET", "ADJ", "NOUN", "VERB", "ADV"),
    ("DET", "ADJ", "NOUN", "PREP", "DET", "ADJ", "NOUN", "VERB", "ADV"),
]

assert len(GRAMMAR_RULES) == 40


def transduce(source: Sequence[str]) -> List[str]:
    """Deterministic source-to-target mapping of the toy grammar.

    Each token is mapped through the fixed dictionary; every adjacent
    (adjective, noun) pair is emitted in swapped order.
    """
    out: List[str] = []
    i = 0
    while i < len(source):
        w = source[i]
        if (
            _CATEGORY_OF.get(w) == "ADJ"
            and i + 1 < len(source)
            and _CATEGORY_OF.get(source[i + 1]) == "NOUN"
        ):
            out.append(_DICTIONARY[source[i + 1]])
            out.append(_DICTIONARY[w])
            i += 2
        else:
            out.append(_DICTIONARY[w])
            i += 1
    return out


def generate_synthetic(task: str, n: int, max_len: int, seed: int) -> List[SentencePair]:
    """Generate n deterministic sentence pairs for a synthetic task.

    Tasks: "copy" (target = source), "reverse" (target = reversed source),
    "toy_grammar" (templated source, dictionary + reorder target).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if max_len < 2:
        raise ValueError("max_len must be at least 2")
    rng = random.Random(seed)
    pairs: List[SentencePair] = []
    if task in ("copy", "reverse"):
        for _ in range(n):
            length = rng.randint(1, max_len)
            src = [rng.choice(COPY_VOCAB) for _ in range(length)]
            tgt = list(src) if task == "copy" else list(reversed(src))
            pairs.append((src, tgt))
    elif task == "toy_grammar":
        rules = [r for r in GRAMMAR_RULES if len(r) <= max_len]
        if not rules:
            raise ValueError(f"no grammar rule fits max_len={max_len}")
        for _ in range(n):
            rule = rng.choice(rules)
            src = [rng.choice(_LEXICON[cat]) for cat in rule]
            pairs.append((src, transduce(src)))
    else:
        raise ValueError(f"unknown task: {task!r}")
    return pairs


# ---------------------------------------------------------------------------
# File corpora

def load_parallel(src_path: str | Path, tgt_path: str | Path) -> List[SentencePair]:
    """Load a parallel corpus from two aligned one-sentence-per-line files."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line count mismatch: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}"
        )
    return [(s.split(), t.split()) for s, t in zip(src_lines, tgt_lines)]


def load_tsv(path: str | Path) -> List[SentencePair]:
    """Load a parallel corpus from a two-column tab-separated file."""
    pairs = []
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        cols = line.split("\t")
        if len(cols) != 2:
            raise ValueError(f"{path}:{i + 1}: expected 2 tab-separated columns")
        pairs.append((cols[0].split(), cols[1].split()))
    return pairs


# ---------------------------------------------------------------------------
# Mask sampling and batching

def sample_mask(tgt_len: int, rng: random.Random) -> Set[int]:
    """Sample the masked-position set for one target row.

    Draws k uniformly from {1..tgt_len}, then a uniform k-subset of
    positions, so y_mask is always nonempty.
    """
    if tgt_len < 1:
        raise ValueError("tgt_len must be at least 1")
    k = rng.randint(1, tgt_len)
    return set(rng.sample(range(tgt_len), k))


@dataclass
class Batch:
    """One padded training batch.

    src rows are <LEN>-prefixed and right-padded; tgt rows carry a trailing
    <EOS> before padding. tgt_len counts the <EOS>. mask_pos marks the
    y_mask positions; its complement within the true length is y_obs.
    """

    src: torch.Tensor       # [B, S] long
    tgt: torch.Tensor       # [B, T] long
    src_len: torch.Tensor   # [B] long, true length incl. <LEN>
    tgt_len: torch.Tensor   # [B] long, true length incl. <EOS>
    mask_pos: torch.Tensor  # [B, T] bool

    @property
    def src_pad(self) -> torch.Tensor:
        return torch.arange(self.src.size(1)) >= self.src_len.unsqueeze(1)

    @property
    def tgt_pad(self) -> torch.Tensor:
        return torch.arange(self.tgt.size(1)) >= self.tgt_len.unsqueeze(1)

    def target_tokens(self) -> int:
        return int(self.tgt_len.sum())


def make_batches(
    pairs: Sequence[SentencePair],
    vocab: Vocab,
    batch_tokens: int,
    rng: random.Random,
    max_target_len: int | None = None,
    mask_eos: bool = True,
) -> Tuple[List[Batch], int]:
    """Greedy length-bucketed batching with fresh mask sampling per row.

    Pairs whose target (plus <EOS>) or source (plus <LEN>) would exceed
    max_target_len are skipped with a counted warning. Returns the batch
    list (order shuffled by rng) and the skipped-pair count.
    """
    encoded = []
    skipped = 0
    for src, tgt in pairs:
        if not src or not tgt:
            raise ValueError("empty sentence in corpus")
        tgt_len = len(tgt) + 1  # includes <EOS>
        if max_target_len is not None and (
            tgt_len > max_target_len or len(src) + 1 > max_target_len
        ):
            skipped += 1
            continue
        encoded.append((vocab.encode(src), vocab.encode(tgt)))
    if skipped:
        logger.warning("skipped %d pairs exceeding max length", skipped)

    order = list(range(len(encoded)))
    rng.shuffle(order)
    order.sort(key=lambda i: len(encoded[i][1]))  # stable: shuffled within a length

    batches: List[Batch] = []
    group: List[Tuple[List[int], List[int]]] = []
    for i in order:
        src, tgt = encoded[i]
        widest = max([len(tgt) + 1] + [len(t) + 1 for _, t in group])
        if group and (len(group) + 1) * widest > batch_tokens:
            batches.append(_build_batch(group, rng, mask_eos))
            group = []
        group.append((src, tgt))
    if group:
        batches.append(_build_batch(group, rng, mask_eos))
    rng.shuffle(batches)
    return batches, skipped


def _build_batch(
    rows: Sequence[Tuple[List[int], List[int]]], rng: random.Random, mask_eos: bool
) -> Batch:
    bsz = len(rows)
    s_max = max(len(s) for s, _ in rows) + 1
    t_max = max(len(t) for _, t in rows) + 1
    src = torch.full((bsz, s_max), PAD, dtype=torch.long)
    tgt = torch.full((bsz, t_max), PAD, dtype=torch.long)
    src_len = torch.zeros(bsz, dtype=torch.long)
    tgt_len = torch.zeros(bsz, dtype=torch.long)
    mask_pos = torch.zeros(bsz, t_max, dtype=torch.bool)
    for b, (s, t) in enumerate(rows):
        src[b, 0] = LEN
        src[b, 1 : len(s) + 1] = torch.tensor(s, dtype=torch.long)
        src_len[b] = len(s) + 1
        tgt[b, : len(t)] = torch.tensor(t, dtype=torch.long)
        tgt[b, len(t)] = EOS
        tgt_len[b] = len(t) + 1
        # The <EOS> slot is maskable by default; with mask_eos off it only
        # participates when it is the sole target position.
        span = len(t) + 1 if (mask_eos or len(t) == 0) else len(t)
        for p in sample_mask(span, rng):
            mask_pos[b, p] = True
    return Batch(src=src, tgt=tgt, src_len=src_len, tgt_len=tgt_len, mask_pos=mask_pos)


def batch_stream(
    pairs: Sequence[SentencePair],
    vocab: Vocab,
    batch_tokens: int,
    seed: int,
    max_target_len: int | None = None,
    mask_eos: bool = True,
    start_epoch: int = 0,
    start_index: int = 0,
) -> Iterator[Tuple[int, int, Batch]]:
    """Endless deterministic stream of (epoch, index, batch).

    Each epoch's batches are a pure function of (pairs, seed, epoch), so a
    resumed run can rebuild the stream and skip to (start_epoch,
    start_index) to continue bit-exactly.
    """
    epoch = start_epoch
    index = start_index
    while True:
        rng = random.Random(f"{seed}:{epoch}")
        batches, _ = make_batches(
            pairs, vocab, batch_tokens, rng, max_target_len, mask_eos
        )
        while index < len(batches):
            yield epoch, index, batches[index]
            index += 1
        epoch += 1
        index = 0
