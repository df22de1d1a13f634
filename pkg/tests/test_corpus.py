import math
import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmtm import corpus
from cmtm.corpus import (
    GRAMMAR_RULES,
    _CATEGORY_OF,
    _DICTIONARY,
    generate_synthetic,
    make_batches,
    sample_mask,
    transduce,
)
from cmtm.vocab import EOS, LEN, MASK, PAD, SPECIAL_TOKENS, UNK, Vocab, build_vocab


class TestVocab:
    def test_specials_occupy_first_six_ids(self):
        v = build_vocab([(["a"], ["b"])])
        assert v.tokens[:6] == list(SPECIAL_TOKENS)
        assert v.index["<PAD>"] == 0 and v.index["<UNK>"] == 5

    def test_count_then_lexicographic_ordering(self):
        v = build_vocab([(["a", "b"], ["b", "a"])])
        # tie on count resolved lexicographically
        assert v.index["a"] == 6
        assert v.index["b"] == 7

    def test_min_count_threshold(self):
        v = build_vocab([(["a", "a", "z"], ["a"])], min_count=2)
        assert "z" not in v.index
        assert v.encode(["z"]) == [UNK]

    def test_empty_corpus_errors(self):
        with pytest.raises(ValueError, match="empty corpus"):
            build_vocab([])

    def test_vocab_size_matches_independent_token_count(self):
        pairs = generate_synthetic("toy_grammar", 100, 12, seed=11)
        seen = set()
        for src, tgt in pairs:
            seen.update(src)
            seen.update(tgt)
        assert len(build_vocab(pairs)) == 6 + len(seen)

    def test_index_inverts_tokens(self):
        v = build_vocab(generate_synthetic("toy_grammar", 50, 10, seed=0))
        for i, t in enumerate(v.tokens):
            assert v.index[t] == i

    @given(st.lists(st.sampled_from(["a", "b", "c"]), min_size=1, max_size=20))
    @settings(max_examples=50)
    def test_encode_decode_round_trip(self, sent):
        v = build_vocab([(["a", "b", "c"], ["a", "b", "c"])])
        assert v.decode(v.encode(sent)) == sent

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(generate_synthetic("toy_grammar", 30, 10, seed=2))
        v.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt").tokens == v.tokens


class TestSynthetic:
    def test_copy_target_equals_source(self):
        (src, tgt), = generate_synthetic("copy", 1, 5, seed=7)
        assert tgt == src

    def test_reverse(self):
        for src, tgt in generate_synthetic("reverse", 20, 8, seed=1):
            assert tgt == list(reversed(src))

    def test_grammar_has_forty_rules(self):
        assert len(GRAMMAR_RULES) == 40

    def test_toy_grammar_matches_independent_transduction(self):
        # independent oracle: dictionary map, then swap mapped adj/noun pairs
        def oracle(src):
            mapped = [_DICTIONARY[w] for w in src]
            cats = [_CATEGORY_OF[w] for w in src]
            i = 0
            while i < len(src) - 1:
                if cats[i] == "ADJ" and cats[i + 1] == "NOUN":
                    mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
                    i += 2
                else:
                    i += 1
            return mapped

        for src, tgt in generate_synthetic("toy_grammar", 1000, 12, seed=1):
            assert tgt == oracle(src)
            assert tgt == transduce(src)

    def test_deterministic_under_seed(self):
        a = generate_synthetic("toy_grammar", 50, 10, seed=9)
        assert a == generate_synthetic("toy_grammar", 50, 10, seed=9)
        assert a != generate_synthetic("toy_grammar", 50, 10, seed=10)

    def test_max_len_respected(self):
        for src, _ in generate_synthetic("copy", 200, 6, seed=0):
            assert 1 <= len(src) <= 6

    def test_unknown_task_errors(self):
        with pytest.raises(ValueError, match="unknown task"):
            generate_synthetic("sort", 1, 5, seed=0)

    def test_bad_sizes_error(self):
        with pytest.raises(ValueError):
            generate_synthetic("copy", 0, 5, seed=0)
        with pytest.raises(ValueError):
            generate_synthetic("copy", 5, 1, seed=0)


class TestSampleMask:
    def test_length_one_always_masked(self):
        rng = random.Random(0)
        for _ in range(20):
            assert sample_mask(1, rng) == {0}

    def test_zero_length_errors(self):
        with pytest.raises(ValueError):
            sample_mask(0, random.Random(0))

    def test_size_distribution_len_two(self):
        rng = random.Random(42)
        n = 100_000
        ones = sum(1 for _ in range(n) if len(sample_mask(2, rng)) == 1)
        assert abs(ones / n - 0.5) < 0.01

    def test_marginal_len_three(self):
        # uniform k then uniform subset: each index masked w.p. E[k]/3 = 2/3
        rng = random.Random(7)
        n = 100_000
        hits = Counter()
        for _ in range(n):
            hits.update(sample_mask(3, rng))
        for i in range(3):
            assert abs(hits[i] / n - 2 / 3) < 0.01

    def test_expected_masked_fraction_closed_form(self):
        # E[|mask|]/L = (L+1)/(2L)
        L, rng, n = 5, random.Random(13), 50_000
        mean = sum(len(sample_mask(L, rng)) for _ in range(n)) / n
        assert abs(mean / L - (L + 1) / (2 * L)) < 0.01


class TestBatches:
    def test_single_pair_construction(self):
        v = build_vocab([(["a", "b"], ["c"])])
        (batch,), skipped = make_batches([(["a", "b"], ["c"])], v, 10, random.Random(0))
        assert skipped == 0
        assert batch.src[0].tolist() == [LEN, v.index["a"], v.index["b"]]
        assert batch.tgt[0].tolist() == [v.index["c"], EOS]
        assert batch.src_len[0] == 3 and batch.tgt_len[0] == 2

    def test_token_budget(self):
        pairs = [(["a"], ["b", "c"])] * 4
        v = build_vocab(pairs)
        batches, _ = make_batches(pairs, v, 8, random.Random(0))
        for b in batches:
            assert b.tgt.numel() <= 8  # padded target tokens within budget

    def test_multiset_preserved(self):
        pairs = generate_synthetic("toy_grammar", 1000, 12, seed=5)
        v = build_vocab(pairs)
        batches, _ = make_batches(pairs, v, 300, random.Random(1), max_target_len=16)
        emitted = Counter()
        for b in batches:
            for row in range(b.src.size(0)):
                src = tuple(v.decode(b.src[row, 1 : b.src_len[row]].tolist()))
                tgt = tuple(v.decode(b.tgt[row, : b.tgt_len[row] - 1].tolist()))
                emitted[(src, tgt)] += 1
        assert emitted == Counter((tuple(s), tuple(t)) for s, t in pairs)

    def test_mask_partition_and_padding(self):
        pairs = generate_synthetic("copy", 200, 10, seed=2)
        v = build_vocab(pairs)
        batches, _ = make_batches(pairs, v, 120, random.Random(3), max_target_len=16)
        for b in batches:
            for row in range(b.src.size(0)):
                t_len = int(b.tgt_len[row])
                masked = set(b.mask_pos[row].nonzero().squeeze(-1).tolist())
                assert 1 <= len(masked) <= t_len
                assert masked <= set(range(t_len))  # never on padding
                # complement within true length is exactly y_obs
                assert len(masked) + (t_len - len(masked)) == t_len
                assert (b.src[row, b.src_len[row]:] == PAD).all()
                assert (b.tgt[row, t_len:] == PAD).all()

    def test_overlong_pairs_skipped_with_count(self, caplog):
        pairs = [(["a"] * 30, ["b"] * 30), (["a"], ["b"])]
        v = build_vocab(pairs)
        with caplog.at_level("WARNING"):
            batches, skipped = make_batches(pairs, v, 50, random.Random(0), max_target_len=16)
        assert skipped == 1
        assert sum(b.src.size(0) for b in batches) == 1
        assert "skipped 1 pairs" in caplog.text

    def test_mask_eos_flag(self):
        pairs = [(["a", "b", "c"], ["a", "b", "c"])] * 50
        v = build_vocab(pairs)
        batches, _ = make_batches(
            pairs, v, 40, random.Random(0), max_target_len=16, mask_eos=False
        )
        for b in batches:
            for row in range(b.src.size(0)):
                eos_pos = int(b.tgt_len[row]) - 1
                assert not b.mask_pos[row, eos_pos]

    def test_stream_resumable(self):
        pairs = generate_synthetic("copy", 100, 8, seed=0)
        v = build_vocab(pairs)
        full = corpus.batch_stream(pairs, v, 100, seed=1, max_target_len=16)
        seq = [next(full) for _ in range(25)]
        e, i, _ = seq[10]
        resumed = corpus.batch_stream(
            pairs, v, 100, seed=1, max_target_len=16, start_epoch=e, start_index=i
        )
        for expect in seq[10:]:
            e2, i2, b2 = next(resumed)
            assert (e2, i2) == expect[:2]
            assert (b2.src == expect[2].src).all() and (b2.mask_pos == expect[2].mask_pos).all()
