"""Token/id vocabulary with reserved special tokens."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

PAD_TOKEN = "<PAD>"
SOS_TOKEN = "<SOS>"
EOS_TOKEN = "<EOS>"
MASK_TOKEN = "<MASK>"
LEN_TOKEN = "<LEN>"
UNK_TOKEN = "<UNK>"

SPECIAL_TOKENS = (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN, MASK_TOKEN, LEN_TOKEN, UNK_TOKEN)

PAD, SOS, EOS, MASK, LEN, UNK = range(6)


class Vocab:
    """Bidirectional token/id map. Ids 0-5 are reserved for specials."""

    def __init__(self, corpus_tokens: Sequence[str]):
        for t in corpus_tokens:
            if t in SPECIAL_TOKENS:
                raise ValueError(f"corpus token collides with special token: {t!r}")
        self.tokens: List[str] = list(SPECIAL_TOKENS) + list(corpus_tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:6]) != SPECIAL_TOKENS:
            raise ValueError("vocab file does not start with the reserved specials")
        return cls(lines[6:])


def build_vocab(pairs: Iterable[Tuple[Sequence[str], Sequence[str]]], min_count: int = 1) -> Vocab:
    """Build a deterministic vocab from (source tokens, target tokens) pairs.

    Corpus tokens are ordered by descending count, ties broken
    lexicographically. Tokens seen fewer than min_count times are dropped
    and will encode to <UNK>.
    """
    counts: Counter = Counter()
    n_pairs = 0
    for src, tgt in pairs:
        n_pairs += 1
        counts.update(src)
        counts.update(tgt)
    if n_pairs == 0:
        raise ValueError("empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)
