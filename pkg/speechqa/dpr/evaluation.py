"""
Retrieval and question answering metrics: top-K accuracy, frame-level F1 over time spans, answer selection by
interpolating retriever and reader scores, and WER-bucketed robustness reports.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr  # type: ignore

from speechqa.dpr.base import ConfigError, DataError, EmptyInputError
from speechqa.dpr.corpus import Corpus, Question
from speechqa.dpr.encoders import RetrieverModel
from speechqa.dpr.retrieval import (
    PassageIndex,
    ScoreTable,
    SearchResult,
    build_index,
    encode_items,
    model_input,
    score_table,
)
from speechqa.dpr.util import write_jsonl

WEIGHT_GRID = [round(0.05 * i, 2) for i in range(21)]
NUM_WER_BUCKETS = 10


@dataclass
class RetrievalEvalReport:
    k: int
    top_k_accuracy: float
    hits: Dict[str, bool] = field(default_factory=dict)


@dataclass
class TimeSpan:
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.start_s <= self.end_s:
            raise DataError(f"Invalid time span [{self.start_s}, {self.end_s}]")

    @property
    def length(self) -> float:
        return self.end_s - self.start_s


@dataclass
class AnswerCandidate:
    passage_id: str
    span: TimeSpan
    span_score: float
    retriever_score: float = 0.0
    start_index: int = 0
    """Position of the first span token in the passage transcript."""


@dataclass
class AnswerWeights:
    """Weights of the retriever score and the span score in the answer score."""

    retriever: float = 0.5
    span: float = 0.5


@dataclass
class ReaderConfig:
    """
    The span reader stub.

    :param cue_width: How many transcript tokens before a candidate window are compared with the question.
    :param span_tokens: Length of a candidate window in transcript tokens.
    :param max_candidates: Candidates returned per passage.
    :param ignore_token_ids: Tokens never counted as a match, by default the unk token.
    """

    cue_width: int = 2
    span_tokens: int = 3
    max_candidates: int = 5
    ignore_token_ids: Tuple[int, ...] = (0,)
    retriever_weight: float = 0.5
    span_weight: float = 0.5

    def validate(self) -> None:
        if self.cue_width < 1 or self.span_tokens < 1 or self.max_candidates < 1:
            raise ConfigError(f"Invalid reader configuration {self}")

    @property
    def weights(self) -> AnswerWeights:
        return AnswerWeights(self.retriever_weight, self.span_weight)


def topk_accuracy(results: Mapping[str, SearchResult], gold: Mapping[str, str], k: int) -> RetrievalEvalReport:
    """
    The share of questions whose gold passage is among the first ``k`` results.

    :param results: Search results by question id.
    :param gold: The gold passage id of every question in ``results``.
    :param k: The depth. Results deeper than ``k`` are ignored.
    """
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    if len(results) == 0:
        raise EmptyInputError("No search results to evaluate")
    hits: Dict[str, bool] = {}
    for qid, result in sorted(results.items()):
        if qid not in gold:
            raise DataError(f"No gold passage for question {qid}")
        hits[qid] = gold[qid] in result.ids[:k]
    return RetrievalEvalReport(k=k, top_k_accuracy=sum(hits.values()) / len(hits), hits=hits)


def ff1(predicted: TimeSpan, reference: TimeSpan, predicted_passage_is_gold: bool) -> float:
    """
    Frame-level F1 of two time spans: precision is the overlap relative to the predicted span, recall relative to the
    reference span. Spans on a passage other than the gold one score 0.
    """
    if not predicted_passage_is_gold or predicted.length <= 0 or reference.length <= 0:
        return 0.0
    overlap = min(predicted.end_s, reference.end_s) - max(predicted.start_s, reference.start_s)
    if overlap <= 0:
        return 0.0
    precision = overlap / predicted.length
    recall = overlap / reference.length
    return 2 * precision * recall / (precision + recall)


def answer_score(candidate: AnswerCandidate, weights: AnswerWeights) -> float:
    return weights.retriever * candidate.retriever_score + weights.span * candidate.span_score


def select_answer(candidates: Sequence[AnswerCandidate], weights: AnswerWeights) -> AnswerCandidate | None:
    """
    The candidate with the highest answer score. Ties go to the smaller passage id, then to the earlier start.
    """
    if not candidates:
        return None
    return min(candidates, key=lambda c: (-answer_score(c, weights), c.passage_id, c.span.start_s))


def span_reader_stub(
    passage_tokens: Sequence[int],
    token_times: Sequence[Tuple[float, float]],
    question_tokens: Sequence[int],
    cfg: ReaderConfig | None = None,
    passage_id: str = "",
    retriever_score: float = 0.0,
) -> List[AnswerCandidate]:
    """
    A stand-in for a span extraction model. Every window of ``cfg.span_tokens`` transcript tokens is scored by the
    share of the ``cfg.cue_width`` tokens right before it that also occur in the question.

    :param passage_tokens: The passage transcript.
    :param token_times: Start and end in seconds of every transcript token.
    :param question_tokens: The question transcript.
    :return: The candidates with a positive score, best first (ties by earlier start), at most
             ``cfg.max_candidates``.
    """
    cfg = cfg or ReaderConfig()
    cfg.validate()
    if len(passage_tokens) != len(token_times):
        raise DataError(f"{len(passage_tokens)} tokens but {len(token_times)} timings for passage {passage_id}")
    wanted = set(question_tokens) - set(cfg.ignore_token_ids)
    n = len(passage_tokens)
    scored: List[Tuple[float, int]] = []
    for i in range(1, n):
        cue = passage_tokens[max(0, i - cfg.cue_width) : i]
        score = sum(1 for t in cue if t in wanted) / cfg.cue_width
        if score > 0:
            scored.append((score, i))
    scored.sort(key=lambda item: (-item[0], item[1]))

    candidates = []
    for score, i in scored[: cfg.max_candidates]:
        last = min(i + cfg.span_tokens, n) - 1
        candidates.append(
            AnswerCandidate(
                passage_id=passage_id,
                span=TimeSpan(token_times[i][0], token_times[last][1]),
                span_score=score,
                retriever_score=retriever_score,
                start_index=i,
            )
        )
    return candidates


def _passage_probabilities(result: SearchResult, k: int) -> List[Tuple[str, float]]:
    # Softmax over the retrieved scores puts retriever scores on the same [0, 1] scale as span scores
    hits = result.hits[:k]
    scores = np.array([s for _, s in hits], dtype=np.float64)
    if scores.size == 0:
        return []
    e = np.exp(scores - scores.max())
    probs = e / e.sum()
    return [(pid, float(p)) for (pid, _), p in zip(hits, probs)]


def answer_candidates(
    corpus: Corpus, question: Question, result: SearchResult, reader: ReaderConfig, k: int
) -> List[AnswerCandidate]:
    """Run the reader over the top-``k`` passages retrieved for a question."""
    q_tokens = corpus.transcript(question.id).tokens
    candidates: List[AnswerCandidate] = []
    for pid, prob in _passage_probabilities(result, k):
        transcript = corpus.transcript(pid)
        candidates += span_reader_stub(transcript.tokens, transcript.times, q_tokens, reader, pid, prob)
    return candidates


def open_sqa_predictions(
    corpus: Corpus,
    results: Mapping[str, SearchResult],
    weights: AnswerWeights,
    reader: ReaderConfig | None = None,
    k: int = 20,
) -> Dict[str, AnswerCandidate | None]:
    """
    The final answer of every question: the best-scoring span over its top-``k`` passages.

    :return: The selected candidate per question id, or None if the reader found nothing.
    """
    reader = reader or ReaderConfig()
    return {
        qid: select_answer(answer_candidates(corpus, corpus.question(qid), result, reader, k), weights)
        for qid, result in sorted(results.items())
    }


def _question_ff1(corpus: Corpus, qid: str, prediction: AnswerCandidate | None) -> float:
    if prediction is None:
        return 0.0
    q = corpus.question(qid)
    return ff1(prediction.span, TimeSpan(*q.answer_span_s), prediction.passage_id == q.gold_passage_id)


def open_sqa_ff1(predictions: Mapping[str, AnswerCandidate | None], corpus: Corpus) -> float:
    """The mean FF1 over all questions, unanswered questions counting as 0."""
    if len(predictions) == 0:
        raise EmptyInputError("No predictions to evaluate")
    return float(np.mean([_question_ff1(corpus, qid, p) for qid, p in sorted(predictions.items())]))


def tune_answer_weights(
    corpus: Corpus,
    results: Mapping[str, SearchResult],
    reader: ReaderConfig | None = None,
    k: int = 20,
) -> Tuple[AnswerWeights, Dict[float, float]]:
    """
    Grid search over convex answer-score weights ``(w_r, 1 - w_r)`` with step 0.05, maximizing the open-domain FF1 of
    ``results`` (usually the dev split). Ties go to the point closest to ``(0.5, 0.5)``.

    :return: The best weights and the FF1 of every retriever weight.
    """
    logger = logging.getLogger(__name__)
    if len(results) == 0:
        raise EmptyInputError("Cannot tune answer weights on an empty question set")
    reader = reader or ReaderConfig()
    candidates = {
        qid: answer_candidates(corpus, corpus.question(qid), result, reader, k) for qid, result in results.items()
    }
    scores: Dict[float, float] = {}
    for w_r in WEIGHT_GRID:
        weights = AnswerWeights(w_r, round(1.0 - w_r, 2))
        scores[w_r] = float(
            np.mean([_question_ff1(corpus, qid, select_answer(c, weights)) for qid, c in sorted(candidates.items())])
        )
    best = max(scores.values())
    w_r = min((w for w, s in scores.items() if s == best), key=lambda w: (abs(w - 0.5), w))
    logger.info(f"Answer weights ({w_r}, {round(1 - w_r, 2)}) reach FF1 {best:.4f}")
    return AnswerWeights(w_r, round(1.0 - w_r, 2)), scores


def gold_passage_ff1(corpus: Corpus, questions: Sequence[Question], reader: ReaderConfig | None = None) -> float:
    """
    The FF1 of the reader when it is handed the gold passage of every question, an upper bound for open-domain FF1.
    """
    if len(questions) == 0:
        raise EmptyInputError("No questions to evaluate")
    reader = reader or ReaderConfig()
    values = []
    for q in questions:
        transcript = corpus.transcript(q.gold_passage_id)
        q_tokens = corpus.transcript(q.id).tokens
        candidates = span_reader_stub(transcript.tokens, transcript.times, q_tokens, reader, q.gold_passage_id)
        values.append(_question_ff1(corpus, q.id, select_answer(candidates, AnswerWeights(0.0, 1.0))))
    return float(np.mean(values))


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Spearman's rank correlation with average ranks for ties. NaN if there are fewer than two points or one side is
    constant.
    """
    a, b = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"Cannot correlate sequences of lengths {a.size} and {b.size}")
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan")
    return float(spearmanr(a, b).statistic)


@dataclass
class WerBucket:
    lo: float
    hi: float
    n: int
    accuracy: Dict[str, float | None]

    @property
    def midpoint(self) -> float:
        return round((self.lo + self.hi) / 2, 4)


@dataclass
class WerBucketReport:
    """Top-K accuracy of several retrievers per bucket of question transcript WER."""

    retrievers: List[str]
    buckets: List[WerBucket]

    def to_records(self) -> List[Dict]:
        return [
            {"lo": b.lo, "hi": b.hi, "midpoint": b.midpoint, "n": b.n, "accuracy": dict(sorted(b.accuracy.items()))}
            for b in self.buckets
        ]

    def trend(self, retriever: str) -> float:
        """Rank correlation between bucket midpoint and accuracy over the populated buckets."""
        populated = [b for b in self.buckets if b.accuracy[retriever] is not None]
        return rank_correlation([b.midpoint for b in populated], [b.accuracy[retriever] for b in populated])

    def to_text(self) -> str:
        header = f"{'WER bucket':<14}{'n':>6}" + "".join(f"{r:>22}" for r in self.retrievers)
        lines = [header, "-" * len(header)]
        for b in self.buckets:
            cells = "".join(
                f"{'n/a':>22}" if b.accuracy[r] is None else f"{b.accuracy[r]:>22.4f}" for r in self.retrievers
            )
            closing = "]" if b.hi >= 1.0 else ")"
            lines.append(f"[{b.lo:.1f}, {b.hi:.1f}{closing:<5}{b.n:>6}{cells}")
        return "\n".join(lines) + "\n"

    def write(self, directory: Path | str, name: str = "wer_report") -> None:
        """Write ``<name>.jsonl``, ``<name>.txt`` and one ``<name>.<retriever>.csv`` per retriever."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_jsonl(directory / f"{name}.jsonl", self.to_records())
        (directory / f"{name}.txt").write_text(self.to_text(), encoding="utf-8")
        for r in self.retrievers:
            with open(directory / f"{name}.{r}.csv", "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["bucket_midpoint", "accuracy"])
                for b in self.buckets:
                    acc = b.accuracy[r]
                    writer.writerow([f"{b.midpoint:.2f}", "" if acc is None else f"{acc:.6f}"])


def wer_bucket(value: float) -> int:
    """The bucket ``[i/10, (i+1)/10)`` of a WER. Everything from 0.9 up, including WER above 1, falls in the last."""
    return min(max(int(np.floor(value * NUM_WER_BUCKETS + 1e-9)), 0), NUM_WER_BUCKETS - 1)


def wer_bucket_report(
    question_ids: Sequence[str], wers: Mapping[str, float], hits: Mapping[str, Mapping[str, bool]]
) -> WerBucketReport:
    """
    Bucket questions by the WER of their transcript and compute per-bucket top-K accuracy for every retriever.

    :param question_ids: The questions to report on.
    :param wers: Transcript WER per question id.
    :param hits: For every retriever name, whether each question's gold passage was retrieved.
    :return: Ten buckets. Empty buckets have ``n = 0`` and accuracy None.
    """
    logger = logging.getLogger(__name__)
    names = sorted(hits.keys())
    members: List[List[str]] = [[] for _ in range(NUM_WER_BUCKETS)]
    for qid in question_ids:
        if qid not in wers:
            raise DataError(f"No WER for question {qid}")
        members[wer_bucket(wers[qid])].append(qid)

    buckets = []
    for i, qids in enumerate(members):
        accuracy: Dict[str, float | None] = {}
        for name in names:
            if qids:
                accuracy[name] = sum(bool(hits[name][q]) for q in qids) / len(qids)
            else:
                accuracy[name] = None
        buckets.append(WerBucket(lo=i / NUM_WER_BUCKETS, hi=(i + 1) / NUM_WER_BUCKETS, n=len(qids), accuracy=accuracy))
    empty = [f"[{b.lo:.1f}, {b.hi:.1f})" for b in buckets if b.n == 0]
    if empty:
        logger.warning(f"Empty WER buckets: {', '.join(empty)}")
    return WerBucketReport(retrievers=names, buckets=buckets)


def passage_index(
    model: RetrieverModel,
    corpus: Corpus,
    processes: int = 1,
    progress_callback: None | Callable[[float], None] = None,
) -> PassageIndex:
    """An index over the whole archive of a corpus, encoded by ``model``."""
    items = {pid: model_input(corpus, pid, model.input_kind) for pid in corpus.passage_ids}
    return build_index(items, model, processes, progress_callback)


def retriever_table(
    model: RetrieverModel,
    corpus: Corpus,
    questions: Sequence[Question],
    index: PassageIndex | None = None,
    processes: int = 1,
) -> ScoreTable:
    """
    Similarities of the given questions to every passage of the archive.

    :param index: A prebuilt index of ``model``. Built on the fly if not given.
    """
    index = index if index is not None else passage_index(model, corpus, processes)
    items = {q.id: model_input(corpus, q.id, model.input_kind) for q in questions}
    ids, vectors = encode_items(model, items, "question", processes)
    return score_table(index, ids, vectors)


def evaluate_topk(
    model: RetrieverModel,
    corpus: Corpus,
    split: str,
    k: int = 20,
    index: PassageIndex | None = None,
    processes: int = 1,
) -> RetrievalEvalReport:
    """Top-K accuracy of ``model`` on a split, searching the full archive."""
    questions = corpus.split(split)
    if not questions:
        raise EmptyInputError(f"The {split} split has no questions")
    table = retriever_table(model, corpus, questions, index, processes)
    return topk_accuracy(table.results(k), corpus.gold(questions), k)


@dataclass
class EvaluationRow:
    """One line of the evaluation summary."""

    name: str
    split: str
    top_k: Dict[int, float]
    ff1: float | None = None
    weights: Tuple[float, float] | None = None


def format_summary(rows: Sequence[EvaluationRow]) -> str:
    ks = sorted({k for r in rows for k in r.top_k})
    header = f"{'retriever':<34}{'split':<7}" + "".join(f"{'top-' + str(k):>9}" for k in ks) + f"{'FF1':>9}"
    lines = [header, "-" * len(header)]
    for r in rows:
        acc = "".join(f"{100 * r.top_k[k]:>8.2f}%" if k in r.top_k else f"{'':>9}" for k in ks)
        f1 = f"{r.ff1:>9.3f}" if r.ff1 is not None else f"{'':>9}"
        lines.append(f"{r.name:<34}{r.split:<7}{acc}{f1}")
    return "\n".join(lines) + "\n"
