"""
The training objectives of the retrievers: dot-product similarity, the in-batch-negative NLL and the distillation loss
that combines it with the two cross terms against a frozen teacher.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from speechqa.dpr.base import ConfigError, DimensionError, NumericalFault
from speechqa.dpr.numerics import Tensor, log_softmax, matmul, mul, scale, sum_all


@dataclass
class KDWeights:
    """
    The weights of the two distillation terms.

    :param alpha: Weight of NLL(student questions, teacher passages).
    :param beta: Weight of NLL(teacher questions, student passages).
    """

    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self) -> None:
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)) or self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"Distillation weights must be finite and non-negative, got {self.alpha}, {self.beta}")

    @property
    def uses_teacher(self) -> bool:
        return self.alpha > 0 or self.beta > 0


@dataclass
class Batch:
    """
    Row-aligned sentence vectors of one batch: row ``i`` of every matrix belongs to question ``i`` and its gold passage.
    The gold passages of the other rows are the negatives of row ``i``.
    """

    question_vecs: Tensor
    positive_passage_vecs: Tensor
    teacher_question_vecs: Tensor | None = None
    teacher_passage_vecs: Tensor | None = None

    def __post_init__(self) -> None:
        q, p = self.question_vecs, self.positive_passage_vecs
        if q.ndim != 2 or q.shape != p.shape:
            raise DimensionError(f"Question and passage matrices must be B×d of equal shape, got {q.shape}, {p.shape}")

    @property
    def size(self) -> int:
        return self.question_vecs.shape[0]


@dataclass
class LossTerms:
    """The individual terms of one loss evaluation, as plain floats for the training log."""

    total: float
    nll_ss: float
    nll_st: float | None = None
    nll_ts: float | None = None


def similarity(q_vec: Tensor | np.ndarray, p_vec: Tensor | np.ndarray) -> float:
    """
    The relevance of a passage to a question: the plain inner product of their sentence vectors.
    """
    q = q_vec.data if isinstance(q_vec, Tensor) else np.asarray(q_vec, dtype=np.float64)
    p = p_vec.data if isinstance(p_vec, Tensor) else np.asarray(p_vec, dtype=np.float64)
    if q.ndim != 1 or q.shape != p.shape:
        raise DimensionError(f"similarity needs two vectors of equal length, got {q.shape} and {p.shape}")
    return float(np.dot(q, p))


def score_matrix(question_vecs: Tensor, passage_vecs: Tensor) -> Tensor:
    """The ``B×B`` matrix of all question/passage similarities of a batch."""
    if question_vecs.ndim != 2 or passage_vecs.ndim != 2 or question_vecs.shape[1] != passage_vecs.shape[1]:
        raise DimensionError(f"Cannot score {question_vecs.shape} against {passage_vecs.shape}")
    return matmul(question_vecs, passage_vecs.T)


def nll_in_batch(question_vecs: Tensor, passage_vecs: Tensor) -> Tensor:
    """
    The mean negative log-likelihood of each question's own passage against the other passages of the batch.

    :param question_vecs: ``B×d``.
    :param passage_vecs: ``B×d``, row ``i`` is the gold passage of question ``i``.
    :return: A scalar tensor. It is exactly 0 for ``B = 1``.
    """
    if question_vecs.shape != passage_vecs.shape or question_vecs.ndim != 2:
        raise DimensionError(f"nll_in_batch needs two B×d matrices, got {question_vecs.shape}, {passage_vecs.shape}")
    b = question_vecs.shape[0]
    if b < 1:
        raise DimensionError("nll_in_batch needs at least one row")

    scores = score_matrix(question_vecs, passage_vecs)
    finite = np.isfinite(scores.data).all(axis=1)
    if not finite.all():
        raise NumericalFault("Non-finite similarity scores", op="score_matrix", row=int(np.argmin(finite)))
    log_probs = log_softmax(scores)
    return scale(sum_all(mul(log_probs, Tensor(np.eye(b)))), -1.0 / b)


def _detached(t: Tensor) -> Tensor:
    return Tensor(t.data, op="teacher")


def total_loss_terms(student: Batch, teacher: Batch | None, w: KDWeights) -> Tuple[Tensor, LossTerms]:
    """
    The distillation objective together with its individual terms.

    The teacher's matrices are cut from the graph, so whatever computed them never receives a gradient. With both
    weights at zero the teacher is not needed and the result is exactly the in-batch NLL of the student.
    """
    nll_ss = nll_in_batch(student.question_vecs, student.positive_passage_vecs)
    if not w.uses_teacher:
        return nll_ss, LossTerms(total=nll_ss.item(), nll_ss=nll_ss.item())

    if teacher is None:
        raise ConfigError(f"Distillation weights alpha={w.alpha}, beta={w.beta} need teacher vectors")
    if teacher.question_vecs.shape != student.question_vecs.shape:
        raise DimensionError(
            f"Teacher batch {teacher.question_vecs.shape} is not row-aligned with student batch"
            f" {student.question_vecs.shape}"
        )
    teacher_q = _detached(teacher.question_vecs)
    teacher_p = _detached(teacher.positive_passage_vecs)

    loss = nll_ss
    terms = LossTerms(total=0.0, nll_ss=nll_ss.item())
    if w.alpha > 0:
        nll_st = nll_in_batch(student.question_vecs, teacher_p)
        loss = loss + scale(nll_st, w.alpha)
        terms.nll_st = nll_st.item()
    if w.beta > 0:
        nll_ts = nll_in_batch(teacher_q, student.positive_passage_vecs)
        loss = loss + scale(nll_ts, w.beta)
        terms.nll_ts = nll_ts.item()
    terms.total = loss.item()
    return loss, terms


def total_loss(student: Batch, teacher: Batch | None, w: KDWeights) -> Tensor:
    """
    ``NLL(Q_S, P_S) + alpha * NLL(Q_S, P_T) + beta * NLL(Q_T, P_S)``.

    :param student: The student's vectors, attached to the graph.
    :param teacher: The frozen teacher's vectors for the same rows. Only needed if a weight is positive.
    :param w: The distillation weights.
    :return: A scalar tensor.
    """
    return total_loss_terms(student, teacher, w)[0]
