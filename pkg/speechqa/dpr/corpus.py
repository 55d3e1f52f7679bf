"""
Synthetic spoken archives.

A corpus consists of passages grouped into documents and of questions, each paired with exactly one gold passage and
an answer span inside it. Every utterance has clean tokens, "speech" in the form of frame features generated from
per-token prototypes, and a transcript produced by a token-level error channel that stands in for an unsupervised
speech recognizer.
"""
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from speechqa.dpr.base import ConfigError, DataError, EmptyInputError, PathError
from speechqa.dpr.encoders import FrameSequence, load_frame_features, save_frame_features
from speechqa.dpr.util import canonical_json, derive_seed, float32_roundtrip, make_rng, read_jsonl, write_jsonl

SPLITS = ("train", "dev", "test")

CORPUS_README = """\
Synthetic spoken archive generated by speechqa-dpr.

manifest.jsonl      One JSON object per line. The first line has "kind": "corpus" and holds the generator
                    configuration and the vocabulary layout. It is followed by all passages ("kind": "passage")
                    and all questions ("kind": "question"), each sorted by id.
features/<id>.mat   Frame features of one utterance in the binary matrix format: four little-endian uint32
                    (magic 0x5344504D, version 1, T, D) followed by T*D little-endian float32, row-major.
transcripts/<id>.json
                    The error-channel transcript of one utterance: token ids, the index of the clean token each
                    one came from (-1 for insertions), start and end time of every token in seconds, and the WER
                    against the clean tokens.
"""


@dataclass
class CorpusConfig:
    """
    Sizes and layout of a generated corpus. The defaults are the desk-scale ones.
    """

    seed: int = 0
    num_passages: int = 2000
    passages_per_document: int = 4
    train_questions: int = 500
    dev_questions: int = 100
    test_questions: int = 150

    num_topics: int = 20
    function_tokens: int = 30
    content_tokens_per_topic: int = 25
    entity_tokens: int = 200
    oov_entity_fraction: float = 0.2
    """Share of the entity tokens the error channel can never recognize."""

    passage_tokens: int = 24
    entities_per_passage: int = 3
    content_fraction: float = 0.6
    """Probability that a non-entity passage position holds a topic word rather than a function word."""
    passage_duration_s: float = 40.0

    cue_tokens: int = 2
    """Number of passage tokens right before the answer span that the question repeats."""
    answer_span_tokens: int = 3
    question_topic_tokens: int = 3
    question_function_tokens: int = 2

    passage_speakers: int = 16
    train_speakers: int = 12
    dev_speakers: int = 4
    test_speakers: int = 4

    def split_sizes(self) -> Dict[str, int]:
        return {"train": self.train_questions, "dev": self.dev_questions, "test": self.test_questions}

    def validate(self) -> None:
        if self.num_topics < 1 or self.content_tokens_per_topic < 1 or self.function_tokens < 1:
            raise ConfigError("A corpus needs at least one topic, one topic word and one function word")
        if self.entity_tokens < 1 or self.entities_per_passage < 1:
            raise ConfigError("A corpus needs entity tokens, answers are anchored on them")
        if not 0.0 <= self.oov_entity_fraction <= 1.0 or not 0.0 <= self.content_fraction <= 1.0:
            raise ConfigError("Fractions must lie in [0, 1]")
        if self.num_passages < 1 or self.passages_per_document < 1:
            raise ConfigError("A corpus needs at least one passage")
        sizes = self.split_sizes()
        if min(sizes.values()) < 0:
            raise ConfigError(f"Negative split size in {sizes}")
        if self.num_passages < 2 * max(sizes.values()):
            raise ConfigError(
                f"{self.num_passages} passages are too few for splits of {sizes}, at least twice the largest split is"
                f" needed"
            )
        if self.num_passages < sum(sizes.values()):
            raise ConfigError("Every question needs its own gold passage")
        if self.cue_tokens < 1 or self.answer_span_tokens < 1:
            raise ConfigError("Answer spans and cues need at least one token each")
        anchor_positions = self.passage_tokens - self.answer_span_tokens - self.cue_tokens + 1
        if anchor_positions < self.entities_per_passage:
            raise ConfigError(
                f"Passages of {self.passage_tokens} tokens cannot hold {self.entities_per_passage} answer anchors"
            )
        if self.passage_duration_s <= 0:
            raise ConfigError("Passage duration must be positive")
        for split in SPLITS:
            if sizes[split] > 0 and getattr(self, f"{split}_speakers") < 1:
                raise ConfigError(f"The {split} split has questions but no speakers")
        if self.passage_speakers < 1:
            raise ConfigError("At least one passage speaker is needed")


@dataclass
class FeaturizerConfig:
    """
    The stand-in for frozen self-supervised speech features: every token is rendered as ``frames_per_token`` copies of
    a fixed random prototype vector plus Gaussian noise.
    """

    frames_per_token: int = 12
    feature_dim: int = 16
    noise_std: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.frames_per_token < 1 or self.feature_dim < 1 or self.noise_std < 0:
            raise ConfigError(f"Invalid featurizer configuration {self}")

    def token_prototype_table(self, vocab_size: int) -> np.ndarray:
        """
        The ``V×D`` prototype table. Row ``i`` only depends on the seed and ``i``, so the table for a larger vocabulary
        extends the one for a smaller vocabulary. The values are exactly representable in float32.
        """
        key = (self.seed, self.feature_dim, vocab_size)
        if key not in _PROTOTYPE_CACHE:
            rows = [make_rng(self.seed, "prototype", i).normal(0.0, 1.0, self.feature_dim) for i in range(vocab_size)]
            table = np.array(rows, dtype=np.float64).reshape(vocab_size, self.feature_dim)
            _PROTOTYPE_CACHE[key] = float32_roundtrip(table)
        return _PROTOTYPE_CACHE[key]


_PROTOTYPE_CACHE: Dict[Tuple[int, int, int], np.ndarray] = {}


@dataclass
class ErrorChannelConfig:
    """
    A token-level noisy channel. For every clean token one draw decides between substitution, deletion, insertion
    (the token is kept and a random token follows it) and a plain copy.

    :param oov_token_ids: Tokens the channel can never recognize. They are always transcribed as ``unk_id``.
    :param vocab_size: Substitutions and insertions are drawn uniformly from ``[0, vocab_size)``. 0 means one more
                       than the largest token seen.
    :param rate_range: If the upper bound is positive, every question draws its total error rate uniformly from this
                       range and splits it in the proportions of the three base rates.
    """

    sub_rate: float = 0.12
    del_rate: float = 0.04
    ins_rate: float = 0.04
    oov_token_ids: Tuple[int, ...] = ()
    seed: int = 0
    vocab_size: int = 0
    unk_id: int = 0
    rate_range: Tuple[float, float] = (0.0, 0.0)

    def validate(self) -> None:
        rates = (self.sub_rate, self.del_rate, self.ins_rate)
        if any(not 0.0 <= r <= 1.0 for r in rates) or sum(rates) > 1.0 + 1e-12:
            raise ConfigError(f"Error rates must lie in [0, 1] and sum to at most 1, got {rates}")
        lo, hi = self.rate_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"Invalid rate range {self.rate_range}")

    @property
    def total_rate(self) -> float:
        return self.sub_rate + self.del_rate + self.ins_rate

    def with_total_rate(self, rate: float) -> "ErrorChannelConfig":
        """The same channel with all three rates scaled to sum to ``rate``."""
        total = self.total_rate
        if total > 0:
            shares = (self.sub_rate / total, self.del_rate / total, self.ins_rate / total)
        else:
            shares = (0.6, 0.2, 0.2)
        return replace(self, sub_rate=rate * shares[0], del_rate=rate * shares[1], ins_rate=rate * shares[2])


@dataclass
class Vocabulary:
    """
    The token id layout: ``unk``, function words shared by all topics, the content words of each topic, then entities.
    """

    size: int
    unk_id: int
    function_ids: List[int]
    topic_ids: List[List[int]]
    entity_ids: List[int]
    oov_ids: List[int]

    @classmethod
    def from_config(cls, cfg: CorpusConfig) -> "Vocabulary":
        next_id = 1
        function_ids = list(range(next_id, next_id + cfg.function_tokens))
        next_id += cfg.function_tokens
        topic_ids = []
        for _ in range(cfg.num_topics):
            topic_ids.append(list(range(next_id, next_id + cfg.content_tokens_per_topic)))
            next_id += cfg.content_tokens_per_topic
        entity_ids = list(range(next_id, next_id + cfg.entity_tokens))
        next_id += cfg.entity_tokens
        n_oov = int(round(cfg.entity_tokens * cfg.oov_entity_fraction))
        return cls(
            size=next_id,
            unk_id=0,
            function_ids=function_ids,
            topic_ids=topic_ids,
            entity_ids=entity_ids,
            oov_ids=entity_ids[:n_oov],
        )


@dataclass
class Passage:
    id: str
    document_id: str
    tokens: List[int]
    duration_s: float
    topic: int
    speaker: int

    @property
    def token_duration_s(self) -> float:
        return self.duration_s / len(self.tokens)


@dataclass
class Question:
    id: str
    split: str
    tokens: List[int]
    gold_passage_id: str
    answer_span_s: Tuple[float, float]
    answer_start: int
    """Index of the first answer token in the gold passage."""
    speaker: int
    duration_s: float


@dataclass
class Transcript:
    """
    The channel output for one utterance.

    :param source_index: For every hypothesis token, the index of the clean token it stems from, -1 for insertions.
    :param times: Start and end of every hypothesis token in seconds. Insertions get a zero-length interval at the
                  end of the token they follow.
    """

    utterance_id: str
    tokens: List[int]
    source_index: List[int]
    times: List[Tuple[float, float]]
    wer: float

    def to_json(self) -> Dict:
        return {
            "utterance_id": self.utterance_id,
            "tokens": self.tokens,
            "source_index": self.source_index,
            "times": [list(t) for t in self.times],
            "wer": self.wer,
        }

    @classmethod
    def from_json(cls, record: Dict) -> "Transcript":
        return cls(
            utterance_id=record["utterance_id"],
            tokens=[int(t) for t in record["tokens"]],
            source_index=[int(i) for i in record["source_index"]],
            times=[(float(s), float(e)) for s, e in record["times"]],
            wer=float(record["wer"]),
        )


def wer(reference: Sequence[int], hypothesis: Sequence[int]) -> float:
    """
    Word error rate: the Levenshtein distance with unit costs, divided by the reference length.

    :param reference: The clean tokens. Must not be empty.
    :param hypothesis: The recognized tokens.
    :return: ``(S + D + I) / N``. Can exceed 1 if there are many insertions.
    """
    if len(reference) == 0:
        raise EmptyInputError("WER is undefined for an empty reference")
    previous = list(range(len(hypothesis) + 1))
    for i, r in enumerate(reference, start=1):
        current = [i]
        for j, h in enumerate(hypothesis, start=1):
            current.append(min(previous[j] + 1, current[j - 1] + 1, previous[j - 1] + (r != h)))
        previous = current
    return previous[-1] / len(reference)


def corrupt_with_alignment(
    tokens: Sequence[int], ch: ErrorChannelConfig, key: str = ""
) -> Tuple[List[int], List[int]]:
    """
    Pass tokens through the error channel and keep track of where every output token came from.

    Every clean token consumes exactly three uniform draws (operation, substitute, inserted token), so raising one
    rate only turns copies into errors and never reshuffles the rest of the sequence.

    :param tokens: The clean tokens.
    :param ch: The channel.
    :param key: Identifies the utterance; together with ``ch.seed`` it fixes the random stream.
    :return: The hypothesis tokens and, for each, the index of its clean token (-1 for insertions).
    """
    ch.validate()
    vocab_size = ch.vocab_size or (max(tokens, default=0) + 1)
    oov = set(ch.oov_token_ids)
    draws = make_rng(ch.seed, "channel", key).random((len(tokens), 3))
    sub_end = ch.sub_rate
    del_end = sub_end + ch.del_rate
    ins_end = del_end + ch.ins_rate

    out: List[int] = []
    source: List[int] = []
    for i, token in enumerate(tokens):
        u, u_sub, u_ins = draws[i]
        if token in oov:
            out.append(ch.unk_id)
            source.append(i)
        elif u < sub_end:
            if vocab_size < 2:
                out.append(ch.unk_id)
            else:
                # Uniform over the vocabulary without the original token
                sub = int(u_sub * (vocab_size - 1))
                out.append(sub + 1 if sub >= token else sub)
            source.append(i)
        elif u < del_end:
            continue
        elif u < ins_end:
            out.extend((token, int(u_ins * vocab_size)))
            source.extend((i, -1))
        else:
            out.append(token)
            source.append(i)
    return out, source


def corrupt_transcript(tokens: Sequence[int], ch: ErrorChannelConfig, key: str = "") -> List[int]:
    """
    Simulate recognizing ``tokens``.

    :return: The hypothesis tokens.
    """
    return corrupt_with_alignment(tokens, ch, key)[0]


def _token_times(source: Sequence[int], token_duration: float) -> List[Tuple[float, float]]:
    times: List[Tuple[float, float]] = []
    last_end = 0.0
    for s in source:
        if s < 0:
            times.append((last_end, last_end))
        else:
            start, last_end = s * token_duration, (s + 1) * token_duration
            times.append((start, last_end))
    return times


def featurize(
    tokens: Sequence[int],
    cfg: FeaturizerConfig,
    utterance_seed: int,
    utterance_id: str = "",
    prototypes: np.ndarray | None = None,
) -> FrameSequence:
    """
    Render tokens as frames: every token becomes ``cfg.frames_per_token`` copies of its prototype plus Gaussian noise.

    The values pass through float32, so features that were written to disk and read again are bit-identical to the
    ones computed in memory.

    :param utterance_seed: Seeds the noise. Corpora derive it from the speaker and the utterance id.
    :param prototypes: The prototype table, computed from ``cfg`` if not given.
    """
    if len(tokens) == 0:
        raise EmptyInputError(f"Cannot featurize an empty utterance {utterance_id}")
    cfg.validate()
    if prototypes is None:
        prototypes = cfg.token_prototype_table(max(tokens) + 1)
    frames = np.repeat(prototypes[np.asarray(tokens, dtype=np.int64)], cfg.frames_per_token, axis=0)
    if cfg.noise_std > 0:
        frames = frames + np.random.default_rng(utterance_seed).normal(0.0, cfg.noise_std, frames.shape)
    return FrameSequence(utterance_id=utterance_id, frames=float32_roundtrip(frames))


def nearest_prototype_decode(frames: FrameSequence, cfg: FeaturizerConfig, vocab_size: int) -> List[int]:
    """
    Recover token ids from frames by averaging every group of ``frames_per_token`` frames and picking the closest
    prototype.
    """
    table = cfg.token_prototype_table(vocab_size)
    f = cfg.frames_per_token
    n = frames.num_frames // f
    means = frames.frames[: n * f].reshape(n, f, -1).mean(axis=1)
    distances = ((means[:, None, :] - table[None, :, :]) ** 2).sum(axis=2)
    return [int(i) for i in distances.argmin(axis=1)]


@dataclass
class Corpus:
    """
    A generated (or loaded) spoken archive.

    :param feature_dir: If set, :meth:`frames` reads the feature files from there instead of featurizing.
    """

    config: CorpusConfig
    featurizer: FeaturizerConfig
    channel: ErrorChannelConfig
    vocabulary: Vocabulary
    passages: Dict[str, Passage]
    questions: Dict[str, Question]
    transcripts: Dict[str, Transcript]
    feature_dir: Path | None = None
    _speakers: Dict[str, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self._speakers = {p.id: p.speaker for p in self.passages.values()}
        self._speakers.update({q.id: q.speaker for q in self.questions.values()})

    @property
    def passage_ids(self) -> List[str]:
        return sorted(self.passages.keys())

    def split(self, name: str) -> List[Question]:
        if name not in SPLITS:
            raise ConfigError(f"Unknown split {name}, expected one of {SPLITS}")
        return [q for qid, q in sorted(self.questions.items()) if q.split == name]

    def question(self, question_id: str) -> Question:
        try:
            return self.questions[question_id]
        except KeyError:
            raise DataError(f"Unknown question id {question_id}") from None

    def passage(self, passage_id: str) -> Passage:
        try:
            return self.passages[passage_id]
        except KeyError:
            raise DataError(f"Unknown passage id {passage_id}") from None

    def tokens(self, utterance_id: str) -> List[int]:
        """The clean tokens of a passage or question."""
        if utterance_id in self.passages:
            return self.passages[utterance_id].tokens
        return self.question(utterance_id).tokens

    def transcript(self, utterance_id: str) -> Transcript:
        try:
            return self.transcripts[utterance_id]
        except KeyError:
            raise DataError(f"No transcript for utterance {utterance_id}") from None

    def question_wer(self, question_id: str) -> float:
        return self.transcript(question_id).wer

    def gold(self, questions: Sequence[Question] | None = None) -> Dict[str, str]:
        questions = list(self.questions.values()) if questions is None else questions
        return {q.id: q.gold_passage_id for q in questions}

    def frames(self, utterance_id: str) -> FrameSequence:
        if utterance_id not in self._speakers:
            raise DataError(f"Unknown utterance id {utterance_id}")
        if self.feature_dir is not None:
            return load_frame_features(self.feature_dir / f"{utterance_id}.mat", utterance_id)
        seed = derive_seed(self.featurizer.seed, "featurize", self._speakers[utterance_id], utterance_id)
        return featurize(
            self.tokens(utterance_id),
            self.featurizer,
            seed,
            utterance_id,
            self.featurizer.token_prototype_table(self.vocabulary.size),
        )

    def summary(self) -> Dict[str, float | int]:
        question_wers = [self.question_wer(q) for q in self.questions]
        passage_wers = [self.transcripts[p].wer for p in self.passages]
        return {
            "passages": len(self.passages),
            **{f"{s}_questions": len(self.split(s)) for s in SPLITS},
            "vocab_size": self.vocabulary.size,
            "mean_question_wer": float(np.mean(question_wers)) if question_wers else 0.0,
            "mean_passage_wer": float(np.mean(passage_wers)) if passage_wers else 0.0,
        }

    def save(self, directory: Path | str, progress_callback: None | Callable[[float], None] = None) -> None:
        """
        Write the corpus to a directory. Two identical corpora produce byte-identical directories.

        :param directory: The target directory. It is created if needed.
        :param progress_callback: Receives the fraction of utterances written.
        """
        logger = logging.getLogger(__name__)
        directory = Path(directory)
        (directory / "features").mkdir(parents=True, exist_ok=True)
        (directory / "transcripts").mkdir(parents=True, exist_ok=True)

        header = {
            "kind": "corpus",
            "format_version": 1,
            "corpus": asdict(self.config),
            "featurizer": asdict(self.featurizer),
            "channel": asdict(self.channel),
            "vocabulary": asdict(self.vocabulary),
        }
        records: List[Dict] = [header]
        records += [{"kind": "passage", **asdict(p)} for _, p in sorted(self.passages.items())]
        records += [{"kind": "question", **asdict(q)} for _, q in sorted(self.questions.items())]
        write_jsonl(directory / "manifest.jsonl", records)
        (directory / "README.txt").write_text(CORPUS_README, encoding="utf-8")

        utterances = sorted(self._speakers.keys())
        for i, uid in enumerate(tqdm(utterances, desc="Writing corpus")):
            save_frame_features(directory / "features" / f"{uid}.mat", self.frames(uid))
            with open(directory / "transcripts" / f"{uid}.json", "w", encoding="utf-8", newline="\n") as f:
                f.write(canonical_json(self.transcripts[uid].to_json()))
                f.write("\n")
            if progress_callback is not None:
                progress_callback((i + 1) / len(utterances))
        logger.info(f"Saved corpus with {len(utterances)} utterances to {directory}")

    @classmethod
    def load(cls, directory: Path | str) -> "Corpus":
        """
        Load a corpus written by :meth:`save`. Frame features are read lazily from the feature files.
        """
        directory = Path(directory)
        manifest = directory / "manifest.jsonl"
        if not manifest.is_file():
            raise PathError(f"{directory} is not a corpus directory, {manifest.name} is missing")

        records = iter(read_jsonl(manifest))
        header = next(records, None)
        if header is None or header.get("kind") != "corpus":
            raise DataError(f"The first line of {manifest} must be the corpus header")
        try:
            config = CorpusConfig(**header["corpus"])
            featurizer = FeaturizerConfig(**header["featurizer"])
            channel_fields = dict(header["channel"])
            channel_fields["oov_token_ids"] = tuple(channel_fields["oov_token_ids"])
            channel_fields["rate_range"] = tuple(channel_fields["rate_range"])
            channel = ErrorChannelConfig(**channel_fields)
            vocabulary = Vocabulary(**header["vocabulary"])
        except (KeyError, TypeError) as e:
            err = DataError(f"Corrupt corpus header in {manifest}")
            err.add_note(str(e))
            raise err from e

        passages: Dict[str, Passage] = {}
        questions: Dict[str, Question] = {}
        for record in records:
            kind = record.pop("kind", None)
            try:
                if kind == "passage":
                    passages[record["id"]] = Passage(**record)
                elif kind == "question":
                    record["answer_span_s"] = tuple(record["answer_span_s"])
                    questions[record["id"]] = Question(**record)
                else:
                    raise DataError(f"Unknown record kind {kind} in {manifest}")
            except TypeError as e:
                err = DataError(f"Corrupt {kind} record in {manifest}")
                err.add_note(str(e))
                raise err from e

        for q in questions.values():
            if q.gold_passage_id not in passages:
                raise DataError(f"Question {q.id} refers to unknown passage {q.gold_passage_id}")

        transcripts = {}
        for uid in sorted(list(passages) + list(questions)):
            path = directory / "transcripts" / f"{uid}.json"
            try:
                with open(path, "r", encoding="utf-8") as f:
                    transcripts[uid] = Transcript.from_json(json.load(f))
            except FileNotFoundError:
                raise DataError(f"Missing transcript {path}") from None
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                err = DataError(f"Corrupt transcript {path}")
                err.add_note(str(e))
                raise err from e

        return cls(
            config=config,
            featurizer=featurizer,
            channel=channel,
            vocabulary=vocabulary,
            passages=passages,
            questions=questions,
            transcripts=transcripts,
            feature_dir=directory / "features",
        )


def _make_transcript(
    utterance_id: str, tokens: Sequence[int], ch: ErrorChannelConfig, token_duration: float
) -> Transcript:
    hyp, source = corrupt_with_alignment(tokens, ch, utterance_id)
    return Transcript(
        utterance_id=utterance_id,
        tokens=hyp,
        source_index=source,
        times=_token_times(source, token_duration),
        wer=wer(tokens, hyp),
    )


def generate_corpus(
    config: CorpusConfig,
    featurizer: FeaturizerConfig | None = None,
    channel: ErrorChannelConfig | None = None,
    progress_callback: None | Callable[[float], None] = None,
) -> Corpus:
    """
    Generate a spoken archive.

    Passages are drawn from a per-document topic: topic words, function words and a few entity tokens. A question is
    a shuffled paraphrase of its gold passage: the cue tokens right before the answer span, one further passage
    keyword, words sampled from the passage's topic and some function words. It is never a contiguous substring of
    the passage.

    :param config: The corpus layout.
    :param featurizer: The frame featurizer. Defaults to :class:`FeaturizerConfig` with the corpus seed.
    :param channel: The error channel. Its OOV ids are extended by the OOV entities of the vocabulary.
    :param progress_callback: Receives the fraction of utterances transcribed.
    :return: The corpus. Generation is deterministic given the seeds.
    """
    logger = logging.getLogger(__name__)
    config.validate()
    featurizer = featurizer if featurizer is not None else FeaturizerConfig(seed=config.seed)
    featurizer.validate()
    channel = channel if channel is not None else ErrorChannelConfig(seed=config.seed)
    channel.validate()

    vocab = Vocabulary.from_config(config)
    channel = replace(
        channel,
        oov_token_ids=tuple(sorted(set(channel.oov_token_ids) | set(vocab.oov_ids))),
        vocab_size=vocab.size,
        unk_id=vocab.unk_id,
    )
    rng = make_rng(config.seed, "corpus")
    token_duration = config.passage_duration_s / config.passage_tokens

    passages: Dict[str, Passage] = {}
    entity_positions: Dict[str, List[int]] = {}
    num_documents = -(-config.num_passages // config.passages_per_document)
    doc_topics = rng.integers(0, config.num_topics, num_documents)
    doc_speakers = rng.integers(0, config.passage_speakers, num_documents)
    first_anchor = config.cue_tokens - 1
    last_anchor = config.passage_tokens - config.answer_span_tokens - 1
    for i in range(config.num_passages):
        doc = i // config.passages_per_document
        topic = int(doc_topics[doc])
        topic_words = vocab.topic_ids[topic]
        use_content = rng.random(config.passage_tokens) < config.content_fraction
        content = rng.choice(topic_words, config.passage_tokens)
        function = rng.choice(vocab.function_ids, config.passage_tokens)
        tokens = np.where(use_content, content, function)
        positions = np.sort(
            rng.choice(np.arange(first_anchor, last_anchor + 1), config.entities_per_passage, replace=False)
        )
        tokens[positions] = rng.choice(vocab.entity_ids, config.entities_per_passage, replace=False)
        pid = f"p{i:05d}"
        passages[pid] = Passage(
            id=pid,
            document_id=f"d{doc:04d}",
            tokens=[int(t) for t in tokens],
            duration_s=config.passage_duration_s,
            topic=topic,
            speaker=int(doc_speakers[doc]),
        )
        entity_positions[pid] = [int(p) for p in positions]

    questions: Dict[str, Question] = {}
    gold_order = rng.permutation(config.num_passages)
    next_gold = 0
    speaker_offset = config.passage_speakers
    for split in SPLITS:
        n_speakers = getattr(config, f"{split}_speakers")
        for j in range(config.split_sizes()[split]):
            passage = passages[f"p{int(gold_order[next_gold]):05d}"]
            next_gold += 1
            anchors = entity_positions[passage.id]
            anchor = anchors[int(rng.integers(0, len(anchors)))]
            start = anchor + 1
            cue = passage.tokens[start - config.cue_tokens : start]
            keyword_positions = [p for p in anchors if p != anchor]
            if keyword_positions:
                keyword = passage.tokens[keyword_positions[int(rng.integers(0, len(keyword_positions)))]]
            else:
                keyword = passage.tokens[int(rng.integers(0, len(passage.tokens)))]
            topic_words = rng.choice(vocab.topic_ids[passage.topic], config.question_topic_tokens).tolist()
            function_words = rng.choice(vocab.function_ids, config.question_function_tokens).tolist()
            tokens = [int(t) for t in [*cue, keyword, *topic_words, *function_words]]
            tokens = [tokens[k] for k in rng.permutation(len(tokens))]

            qid = f"{split}-{j:04d}"
            questions[qid] = Question(
                id=qid,
                split=split,
                tokens=tokens,
                gold_passage_id=passage.id,
                answer_span_s=(start * token_duration, (start + config.answer_span_tokens) * token_duration),
                answer_start=start,
                speaker=speaker_offset + int(rng.integers(0, n_speakers)),
                duration_s=len(tokens) * token_duration,
            )
        speaker_offset += n_speakers

    transcripts: Dict[str, Transcript] = {}
    utterances = sorted(passages) + sorted(questions)
    lo, hi = channel.rate_range
    for i, uid in enumerate(tqdm(utterances, desc="Transcribing")):
        ch = channel
        if uid in questions and hi > 0:
            ch = channel.with_total_rate(float(make_rng(channel.seed, "rate", uid).uniform(lo, hi)))
        tokens = passages[uid].tokens if uid in passages else questions[uid].tokens
        transcripts[uid] = _make_transcript(uid, tokens, ch, token_duration)
        if progress_callback is not None:
            progress_callback((i + 1) / len(utterances))

    corpus = Corpus(
        config=config,
        featurizer=featurizer,
        channel=channel,
        vocabulary=vocab,
        passages=passages,
        questions=questions,
        transcripts=transcripts,
    )
    logger.info(f"Generated corpus: {corpus.summary()}")
    return corpus
