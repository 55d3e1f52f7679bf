"""
Exact maximum-inner-product search over encoded passage archives, and linear ensembling of two retrievers.
"""
import logging
import warnings
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from speechqa.dpr.base import (
    ConfigError,
    CoverageError,
    DataError,
    DimensionError,
    EmptyInputError,
    FingerprintWarning,
)
from speechqa.dpr.corpus import Corpus
from speechqa.dpr.encoders import FrameSequence, InputKind, RetrieverModel
from speechqa.dpr.numerics import no_grad
from speechqa.dpr.util import float32_roundtrip, read_frame_file, write_frame_file

ModelInput = FrameSequence | Sequence[int]

ENSEMBLE_GRID = [round(0.05 * i, 2) for i in range(21)]


@dataclass
class PassageIndex:
    """
    Sentence vectors of a passage archive, sorted by passage id.

    :param encoder_fingerprint: The fingerprint of the model that produced the vectors.
    """

    ids: List[str]
    vectors: np.ndarray
    encoder_fingerprint: str

    def __post_init__(self) -> None:
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DimensionError(f"{len(self.ids)} ids do not match vectors of shape {self.vectors.shape}")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("Duplicate passage ids in index")
        if list(self.ids) != sorted(self.ids):
            order = np.argsort(np.array(self.ids))
            self.ids = [self.ids[i] for i in order]
            self.vectors = self.vectors[order]

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])


@dataclass
class SearchResult:
    """Passages ranked by descending score; equal scores are ordered by ascending id."""

    hits: List[Tuple[str, float]]
    k: int

    @property
    def ids(self) -> List[str]:
        return [pid for pid, _ in self.hits]


@dataclass
class EnsembleWeights:
    w_a: float
    w_b: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.w_a) and np.isfinite(self.w_b)):
            raise ConfigError(f"Ensemble weights must be finite, got {self.w_a}, {self.w_b}")
        if self.w_a == 0 and self.w_b == 0:
            raise ConfigError("Ensemble weights must not both be zero")


def model_input(corpus: Corpus, utterance_id: str, kind: InputKind) -> ModelInput:
    """
    What a retriever of the given kind reads for an utterance: its frames, or its transcript. A transcript the
    channel emptied completely is read as a single unk token.
    """
    match kind:
        case InputKind.FRAMES:
            return corpus.frames(utterance_id)
        case InputKind.TOKENS:
            return corpus.transcript(utterance_id).tokens or [corpus.vocabulary.unk_id]
        case _:
            raise ConfigError(f"Unknown input kind {kind}")


_WORKER_MODEL: RetrieverModel | None = None


def _init_worker(model: RetrieverModel) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _encode_passage_worker(item: Tuple[str, ModelInput]) -> Tuple[str, np.ndarray]:
    assert _WORKER_MODEL is not None
    return _encode_one(_WORKER_MODEL, "passage", item)


def _encode_question_worker(item: Tuple[str, ModelInput]) -> Tuple[str, np.ndarray]:
    assert _WORKER_MODEL is not None
    return _encode_one(_WORKER_MODEL, "question", item)


def _encode_one(model: RetrieverModel, side: str, item: Tuple[str, ModelInput]) -> Tuple[str, np.ndarray]:
    utterance_id, x = item
    try:
        with no_grad():
            vec = model.encode_passage(x) if side == "passage" else model.encode_question(x)
    except Exception as e:
        e.add_note(f"While encoding {side} {utterance_id}")
        raise
    return utterance_id, vec.data


def encode_items(
    model: RetrieverModel,
    items: Mapping[str, ModelInput],
    side: str = "passage",
    processes: int = 1,
    progress_callback: None | Callable[[float], None] = None,
) -> Tuple[List[str], np.ndarray]:
    """
    Encode many utterances with one side of a bi-encoder.

    :param items: Inputs by utterance id.
    :param side: ``"passage"`` or ``"question"``.
    :param processes: Worker processes. With more than one, the model is sent to a :class:`multiprocessing.Pool`
                      once and the inputs are encoded in parallel. The output order is the same either way.
    :return: The sorted ids and the ``N×d`` matrix of their vectors, rounded to float32 precision.
    """
    if side not in ("passage", "question"):
        raise ConfigError(f"Unknown encoder side {side}")
    ids = sorted(items.keys())
    work = [(i, items[i]) for i in ids]
    vectors: List[np.ndarray] = []

    if processes > 1 and len(work) > 1:
        worker = _encode_passage_worker if side == "passage" else _encode_question_worker
        with Pool(processes, initializer=_init_worker, initargs=(model,)) as pool:
            results = pool.imap(worker, work, chunksize=max(1, len(work) // (4 * processes)))
            for n, (_, vec) in enumerate(tqdm(results, total=len(work), desc=f"Encoding {side}s"), start=1):
                vectors.append(vec)
                if progress_callback is not None:
                    progress_callback(n / len(work))
    else:
        for n, item in enumerate(tqdm(work, desc=f"Encoding {side}s"), start=1):
            vectors.append(_encode_one(model, side, item)[1])
            if progress_callback is not None:
                progress_callback(n / len(work))

    matrix = np.stack(vectors) if vectors else np.zeros((0, model.output_dim))
    return ids, float32_roundtrip(matrix)


def build_index(
    passages: Mapping[str, ModelInput],
    model: RetrieverModel,
    processes: int = 1,
    progress_callback: None | Callable[[float], None] = None,
) -> PassageIndex:
    """
    Encode every passage of an archive with the passage encoder.

    :param passages: The model inputs by passage id.
    :param model: The retriever. Only its passage encoder is used.
    :param processes: Worker processes for encoding.
    :param progress_callback: Receives the fraction of passages encoded.
    :return: The index. Vectors carry float32 precision, so the index survives :func:`save_index` unchanged.
    """
    logger = logging.getLogger(__name__)
    if len(passages) == 0:
        raise EmptyInputError("Cannot build an index over zero passages")
    ids, vectors = encode_items(model, passages, "passage", processes, progress_callback)
    index = PassageIndex(ids=ids, vectors=vectors, encoder_fingerprint=model.fingerprint())
    logger.info(f"Built index of {index.size} passages, dimension {index.dim}")
    return index


def search_topk(
    index: PassageIndex, q_vec: np.ndarray, k: int, expected_fingerprint: str | None = None
) -> SearchResult:
    """
    Exact top-K search by inner product.

    :param index: The passage index.
    :param q_vec: The question vector.
    :param k: The number of results. Fewer are returned if the index is smaller.
    :param expected_fingerprint: The fingerprint of the model that encoded ``q_vec``. A :class:`FingerprintWarning`
                                 is issued if it differs from the index's.
    :return: The ranked results.
    """
    q = np.asarray(q_vec, dtype=np.float64)
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise DimensionError(f"Query of shape {q.shape} does not match index dimension {index.dim}")
    if expected_fingerprint is not None and expected_fingerprint != index.encoder_fingerprint:
        warnings.warn(
            f"Index was built by model {index.encoder_fingerprint[:12]}, query comes from {expected_fingerprint[:12]}",
            FingerprintWarning,
        )
    return _rank(index.ids, index.vectors @ q, k)


def _rank(ids: Sequence[str], scores: np.ndarray, k: int) -> SearchResult:
    # ids are sorted, so the position doubles as the id tie-break
    order = np.lexsort((np.arange(len(ids)), -scores))[: min(k, len(ids))]
    return SearchResult(hits=[(ids[i], float(scores[i])) for i in order], k=k)


def search_batch(index: PassageIndex, q_vecs: np.ndarray, k: int, block_size: int = 256) -> List[SearchResult]:
    """
    :func:`search_topk` for the rows of ``q_vecs``, scored block by block.
    """
    q_vecs = np.asarray(q_vecs, dtype=np.float64)
    if q_vecs.ndim != 2 or q_vecs.shape[1] != index.dim:
        raise DimensionError(f"Queries of shape {q_vecs.shape} do not match index dimension {index.dim}")
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    results: List[SearchResult] = []
    for start in range(0, q_vecs.shape[0], block_size):
        scores = q_vecs[start : start + block_size] @ index.vectors.T
        results.extend(_rank(index.ids, row, k) for row in scores)
    return results


@dataclass
class ScoreTable:
    """
    The similarity of every question of a set to every passage of the archive.

    :param scores: ``len(question_ids) × len(passage_ids)``.
    """

    question_ids: List[str]
    passage_ids: List[str]
    scores: np.ndarray

    def __post_init__(self) -> None:
        if self.scores.shape != (len(self.question_ids), len(self.passage_ids)):
            raise DimensionError(
                f"Score table of shape {self.scores.shape} does not match"
                f" {len(self.question_ids)} questions x {len(self.passage_ids)} passages"
            )

    def as_map(self, question_id: str) -> Dict[str, float]:
        row = self.scores[self.question_ids.index(question_id)]
        return {pid: float(s) for pid, s in zip(self.passage_ids, row)}

    def results(self, k: int) -> Dict[str, SearchResult]:
        return {qid: _rank(self.passage_ids, row, k) for qid, row in zip(self.question_ids, self.scores)}

    def hits(self, gold: Mapping[str, str], k: int) -> np.ndarray:
        """For every question, whether its gold passage ranks within the first ``k``."""
        position = {pid: i for i, pid in enumerate(self.passage_ids)}
        out = np.zeros(len(self.question_ids), dtype=bool)
        for n, (qid, row) in enumerate(zip(self.question_ids, self.scores)):
            if qid not in gold:
                raise DataError(f"No gold passage for question {qid}")
            g = position[gold[qid]]
            # Passages ranking before the gold one: strictly higher score, or equal score and smaller id
            before = np.count_nonzero(row > row[g]) + np.count_nonzero(row[:g] == row[g])
            out[n] = before < k
        return out


def score_table(
    index: PassageIndex, question_ids: Sequence[str], q_vecs: np.ndarray, block_size: int = 256
) -> ScoreTable:
    q_vecs = np.asarray(q_vecs, dtype=np.float64)
    if q_vecs.ndim != 2 or q_vecs.shape != (len(question_ids), index.dim):
        raise DimensionError(f"Queries of shape {q_vecs.shape} do not match {len(question_ids)}x{index.dim}")
    blocks = [q_vecs[s : s + block_size] @ index.vectors.T for s in range(0, q_vecs.shape[0], block_size)]
    scores = np.concatenate(blocks, axis=0) if blocks else np.zeros((0, index.size))
    return ScoreTable(question_ids=list(question_ids), passage_ids=list(index.ids), scores=scores)


def ensemble_scores(
    scores_a: Mapping[str, float], scores_b: Mapping[str, float], w: EnsembleWeights
) -> Dict[str, float]:
    """
    ``w_a * a[id] + w_b * b[id]`` for every id. Both maps must cover the same ids.
    """
    missing_b = sorted(set(scores_a) - set(scores_b))
    missing_a = sorted(set(scores_b) - set(scores_a))
    if missing_a or missing_b:
        raise CoverageError(
            f"Score maps cover different passages. Missing in a: {missing_a}, missing in b: {missing_b}"
        )
    return {pid: w.w_a * scores_a[pid] + w.w_b * scores_b[pid] for pid in sorted(scores_a)}


def ensemble_table(a: ScoreTable, b: ScoreTable, w: EnsembleWeights) -> ScoreTable:
    if a.question_ids != b.question_ids:
        missing = sorted(set(a.question_ids) ^ set(b.question_ids))
        raise CoverageError(f"Score tables cover different questions: {missing}")
    if a.passage_ids != b.passage_ids:
        raise CoverageError(f"Score tables cover different passages: {sorted(set(a.passage_ids) ^ set(b.passage_ids))}")
    return ScoreTable(a.question_ids, a.passage_ids, w.w_a * a.scores + w.w_b * b.scores)


def tune_ensemble_weights(
    gold: Mapping[str, str], table_a: ScoreTable, table_b: ScoreTable, k: int = 20
) -> Tuple[EnsembleWeights, Dict[float, float]]:
    """
    Grid search over convex weights ``w_a in {0, 0.05, ..., 1}``, ``w_b = 1 - w_a``, maximizing top-K accuracy.

    :param gold: The gold passage of every question in the tables, usually the dev split.
    :param table_a: Scores of the first retriever.
    :param table_b: Scores of the second retriever, over the same questions and passages.
    :param k: The retrieval depth.
    :return: The best weights (ties go to the grid point closest to 0.5) and the accuracy of every grid point.
    """
    logger = logging.getLogger(__name__)
    if len(table_a.question_ids) == 0:
        raise EmptyInputError("Cannot tune ensemble weights on an empty question set")
    accuracy: Dict[float, float] = {}
    for w_a in ENSEMBLE_GRID:
        w_b = round(1.0 - w_a, 2)
        table = ensemble_table(table_a, table_b, EnsembleWeights(w_a, w_b))
        accuracy[w_a] = float(table.hits(gold, k).mean())

    best = max(accuracy.values())
    best_w_a = min((w for w, acc in accuracy.items() if acc == best), key=lambda w: (abs(w - 0.5), w))
    if all(acc == best for acc in accuracy.values()):
        logger.warning(f"All ensemble weights tie at top-{k} accuracy {best:.4f}")
    logger.info(f"Ensemble weights ({best_w_a}, {round(1 - best_w_a, 2)}) reach top-{k} accuracy {best:.4f}")
    return EnsembleWeights(best_w_a, round(1.0 - best_w_a, 2)), accuracy


def save_index(index: PassageIndex, directory: Path | str, name: str) -> Tuple[Path, Path]:
    """
    Write ``<name>.vecs`` (binary matrix) and ``<name>.manifest`` (fingerprint, then one id per line).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vecs, manifest = directory / f"{name}.vecs", directory / f"{name}.manifest"
    write_frame_file(vecs, index.vectors)
    with open(manifest, "w", encoding="utf-8", newline="\n") as f:
        f.write(index.encoder_fingerprint + "\n")
        for pid in index.ids:
            f.write(pid + "\n")
    return vecs, manifest


def load_index(directory: Path | str, name: str) -> PassageIndex:
    directory = Path(directory)
    vecs, manifest = directory / f"{name}.vecs", directory / f"{name}.manifest"
    if not vecs.is_file() or not manifest.is_file():
        raise DataError(f"Index {name} not found in {directory}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{manifest} is empty")
    try:
        return PassageIndex(ids=lines[1:], vectors=read_frame_file(vecs), encoder_fingerprint=lines[0])
    except DimensionError as e:
        err = DataError(f"Index {name} in {directory} is inconsistent")
        err.add_note(str(e))
        raise err from e
