from dataclasses import replace
from functools import lru_cache
from typing import Sequence

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from speechqa.dpr.base import ConfigError, DataError, EmptyInputError, PathError
from speechqa.dpr.corpus import (
    SPLITS,
    Corpus,
    CorpusConfig,
    ErrorChannelConfig,
    FeaturizerConfig,
    Vocabulary,
    corrupt_transcript,
    corrupt_with_alignment,
    featurize,
    generate_corpus,
    nearest_prototype_decode,
    wer,
)
from speechqa.dpr.util import list_files
from tests.base import tiny_corpus, tiny_corpus_config, tiny_featurizer


def edit_distance(ref: Sequence[int], hyp: Sequence[int]) -> int:
    """The edit distance by its recursive definition."""

    @lru_cache(maxsize=None)
    def d(i: int, j: int) -> int:
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


class TestWer:
    def test_examples(self) -> None:
        assert wer([1, 2, 3], [1, 2, 3]) == 0.0
        assert wer([1, 2, 3], [1, 9, 3]) == pytest.approx(1 / 3)
        assert wer([1, 2, 3], []) == 1.0
        assert wer([1], [1, 2, 3]) == 2.0

    def test_empty_reference(self) -> None:
        with pytest.raises(EmptyInputError):
            wer([], [1])

    @settings(max_examples=200, deadline=None)
    @given(
        ref=st.lists(st.integers(0, 2), min_size=1, max_size=8),
        hyp=st.lists(st.integers(0, 2), max_size=8),
    )
    def test_matches_edit_distance(self, ref, hyp) -> None:
        assert round(wer(ref, hyp) * len(ref)) == edit_distance(tuple(ref), tuple(hyp))


class TestErrorChannel:
    tokens = [i % 50 for i in range(20000)]

    def test_clean_channel_copies(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.0, del_rate=0.0, ins_rate=0.0, vocab_size=50)
        hyp, source = corrupt_with_alignment(self.tokens[:100], ch, "u")
        assert hyp == self.tokens[:100]
        assert source == list(range(100))

    def test_delete_everything(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.0, del_rate=1.0, ins_rate=0.0, vocab_size=50)
        hyp = corrupt_transcript([1, 2, 3, 4], ch, "u")
        assert hyp == []
        assert wer([1, 2, 3, 4], hyp) == 1.0

    def test_oov_tokens_are_never_recognized(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.0, del_rate=0.0, ins_rate=0.0, oov_token_ids=(5,), vocab_size=50)
        assert corrupt_transcript([5, 6, 5], ch, "u") == [0, 6, 0]

    def test_substitution_rate(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.3, del_rate=0.0, ins_rate=0.0, vocab_size=50, seed=1)
        hyp = corrupt_transcript(self.tokens, ch, "long")
        assert len(hyp) == len(self.tokens)
        changed = sum(a != b for a, b in zip(self.tokens, hyp))
        assert abs(changed / len(self.tokens) - 0.3) < 0.01

    def test_substitutes_differ_from_the_original(self) -> None:
        ch = ErrorChannelConfig(sub_rate=1.0, del_rate=0.0, ins_rate=0.0, vocab_size=50)
        hyp = corrupt_transcript(self.tokens[:2000], ch, "u")
        assert all(a != b for a, b in zip(self.tokens, hyp))
        assert all(0 <= t < 50 for t in hyp)

    def test_insertions_keep_the_token(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.0, del_rate=0.0, ins_rate=1.0, vocab_size=50)
        hyp, source = corrupt_with_alignment([1, 2, 3], ch, "u")
        assert hyp[0::2] == [1, 2, 3]
        assert source == [0, -1, 1, -1, 2, -1]

    def test_deterministic(self) -> None:
        ch = ErrorChannelConfig(vocab_size=50)
        assert corrupt_transcript(self.tokens[:200], ch, "a") == corrupt_transcript(self.tokens[:200], ch, "a")
        assert corrupt_transcript(self.tokens[:200], ch, "a") != corrupt_transcript(self.tokens[:200], ch, "b")

    @pytest.mark.parametrize("rate", ["sub_rate", "del_rate", "ins_rate"])
    def test_wer_grows_with_the_rate(self, rate: str) -> None:
        utterances = [self.tokens[i * 24 : (i + 1) * 24] for i in range(40)]
        means = []
        for value in (0.0, 0.1, 0.2, 0.3, 0.5):
            ch = replace(ErrorChannelConfig(sub_rate=0.0, del_rate=0.0, ins_rate=0.0, vocab_size=50), **{rate: value})
            means.append(np.mean([wer(u, corrupt_transcript(u, ch, f"u{i}")) for i, u in enumerate(utterances)]))
        assert means[0] == 0.0
        assert all(a <= b for a, b in zip(means, means[1:]))
        assert means[-1] > 0.3

    def test_with_total_rate(self) -> None:
        ch = ErrorChannelConfig(sub_rate=0.3, del_rate=0.1, ins_rate=0.1).with_total_rate(0.25)
        assert ch.total_rate == pytest.approx(0.25)
        assert ch.sub_rate == pytest.approx(0.15)

    def test_invalid_rates(self) -> None:
        with pytest.raises(ConfigError):
            corrupt_transcript([1], ErrorChannelConfig(sub_rate=0.8, del_rate=0.3), "u")


class TestFeaturize:
    def test_noise_free_frames_repeat_the_prototypes(self) -> None:
        cfg = FeaturizerConfig(frames_per_token=3, feature_dim=4, noise_std=0.0)
        table = cfg.token_prototype_table(10)
        frames = featurize([2, 7, 2], cfg, 0)
        assert frames.frames.shape == (9, 4)
        assert np.array_equal(frames.frames, np.repeat(table[[2, 7, 2]], 3, axis=0))

    def test_prototype_table_extends(self) -> None:
        cfg = FeaturizerConfig(seed=4)
        assert np.array_equal(cfg.token_prototype_table(20)[:10], cfg.token_prototype_table(10))

    def test_speakers_differ_but_decode_alike(self) -> None:
        cfg = FeaturizerConfig(frames_per_token=12, feature_dim=16, noise_std=0.3)
        tokens = [3, 1, 4, 1, 5, 9, 2, 6]
        a, b = featurize(tokens, cfg, 1), featurize(tokens, cfg, 2)
        assert not np.array_equal(a.frames, b.frames)
        assert np.array_equal(a.frames, featurize(tokens, cfg, 1).frames)
        assert nearest_prototype_decode(a, cfg, 10) == tokens
        assert nearest_prototype_decode(b, cfg, 10) == tokens

    def test_empty_utterance(self) -> None:
        with pytest.raises(EmptyInputError):
            featurize([], FeaturizerConfig(), 0)


class TestCorpusConfig:
    def test_vocabulary_layout(self) -> None:
        cfg = tiny_corpus_config()
        vocab = Vocabulary.from_config(cfg)
        assert vocab.size == 1 + 6 + 4 * 8 + 30
        assert vocab.unk_id == 0
        assert vocab.oov_ids == vocab.entity_ids[:6]

    def test_infeasible_configurations(self) -> None:
        with pytest.raises(ConfigError):
            generate_corpus(replace(tiny_corpus_config(), num_topics=0))
        with pytest.raises(ConfigError):
            generate_corpus(replace(tiny_corpus_config(), num_passages=20))
        with pytest.raises(ConfigError):
            generate_corpus(replace(tiny_corpus_config(), dev_speakers=0))

    def test_desk_defaults(self) -> None:
        cfg = CorpusConfig()
        assert cfg.num_passages == 2000
        assert cfg.split_sizes() == {"train": 500, "dev": 100, "test": 150}
        cfg.validate()


class TestGeneratedCorpus:
    @staticmethod
    def progress_callback(progress: float) -> None:
        assert 0.0 <= progress <= 1.0

    def test_counts(self, corpus: Corpus) -> None:
        assert len(corpus.passages) == 40
        assert [len(corpus.split(s)) for s in SPLITS] == [16, 8, 8]
        assert corpus.split("test")[0].id == "test-0000"
        assert corpus.passage_ids[0] == "p00000"

    def test_questions_point_at_their_answers(self, corpus: Corpus) -> None:
        cfg = corpus.config
        for q in corpus.questions.values():
            passage = corpus.passage(q.gold_passage_id)
            start, end = q.answer_span_s
            assert 0.0 <= start < end <= passage.duration_s + 1e-9
            cue = passage.tokens[q.answer_start - cfg.cue_tokens : q.answer_start]
            assert all(t in q.tokens for t in cue)
            assert passage.tokens[q.answer_start - 1] in corpus.vocabulary.entity_ids

    def test_every_question_has_its_own_gold_passage(self, corpus: Corpus) -> None:
        golds = [q.gold_passage_id for q in corpus.questions.values()]
        assert len(set(golds)) == len(golds)

    def test_speakers_do_not_cross_splits(self, corpus: Corpus) -> None:
        speakers = {s: {q.speaker for q in corpus.split(s)} for s in SPLITS}
        speakers["passages"] = {p.speaker for p in corpus.passages.values()}
        names = list(speakers)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                assert not speakers[a] & speakers[b], f"{a} and {b} share speakers"

    def test_transcript_timings(self, corpus: Corpus) -> None:
        for uid, t in corpus.transcripts.items():
            assert len(t.tokens) == len(t.times) == len(t.source_index)
            for s, (start, end) in zip(t.source_index, t.times):
                assert 0.0 <= start <= end <= corpus.config.passage_duration_s + 1e-9
                if s < 0:
                    assert start == end

    def test_frames(self, corpus: Corpus) -> None:
        q = corpus.split("dev")[0]
        frames = corpus.frames(q.id)
        assert frames.num_frames == len(q.tokens) * corpus.featurizer.frames_per_token
        assert frames.feature_dim == corpus.featurizer.feature_dim
        assert np.array_equal(frames.frames, corpus.frames(q.id).frames)

    def test_lookups(self, corpus: Corpus) -> None:
        with pytest.raises(ConfigError):
            corpus.split("validation")
        with pytest.raises(DataError):
            corpus.question("nope")
        with pytest.raises(DataError):
            corpus.frames("nope")

    def test_deterministic_files(self, tmp_path) -> None:
        for name in ("a", "b"):
            tiny_corpus(seed=5).save(tmp_path / name, progress_callback=self.progress_callback)
        files_a = [p.relative_to(tmp_path / "a") for p in list_files(tmp_path / "a")]
        files_b = [p.relative_to(tmp_path / "b") for p in list_files(tmp_path / "b")]
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_seed_changes_the_corpus(self) -> None:
        assert tiny_corpus(seed=1).passages["p00000"].tokens != tiny_corpus(seed=2).passages["p00000"].tokens

    def test_save_and_load(self, corpus: Corpus, tmp_path) -> None:
        corpus.save(tmp_path)
        loaded = Corpus.load(tmp_path)
        assert loaded.passages == corpus.passages
        assert loaded.questions == corpus.questions
        assert loaded.transcripts == corpus.transcripts
        for uid in ("p00003", corpus.split("train")[2].id):
            assert np.array_equal(loaded.frames(uid).frames, corpus.frames(uid).frames)

    def test_load_missing(self, tmp_path) -> None:
        with pytest.raises(PathError):
            Corpus.load(tmp_path / "missing")

    def test_load_corrupt_header(self, tmp_path) -> None:
        (tmp_path / "manifest.jsonl").write_text('{"kind": "passage"}\n', encoding="utf-8")
        with pytest.raises(DataError):
            Corpus.load(tmp_path)

    def test_per_question_error_rates(self) -> None:
        cfg = tiny_corpus_config()
        corpus = generate_corpus(cfg, tiny_featurizer(), ErrorChannelConfig(rate_range=(0.0, 0.8)))
        wers = [corpus.question_wer(q) for q in corpus.questions]
        assert len(set(wers)) > 3
        assert max(wers) > 0.2
