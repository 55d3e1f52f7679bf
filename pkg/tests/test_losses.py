import math

import numpy as np
import pytest

from speechqa.dpr.base import ConfigError, DimensionError, NumericalFault
from speechqa.dpr.losses import Batch, KDWeights, nll_in_batch, similarity, total_loss, total_loss_terms
from speechqa.dpr.numerics import Tensor


def naive_nll(q: np.ndarray, p: np.ndarray) -> float:
    """The in-batch NLL written out with explicit loops."""
    b = q.shape[0]
    total = 0.0
    for i in range(b):
        scores = [sum(q[i, k] * p[j, k] for k in range(q.shape[1])) for j in range(b)]
        m = max(scores)
        log_norm = m + math.log(sum(math.exp(s - m) for s in scores))
        total += log_norm - scores[i]
    return total / b


class TestSimilarity:
    def test_examples(self) -> None:
        assert similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
        assert similarity(np.array([1.0, 2.0]), np.array([3.0, 4.0])) == 11.0
        assert similarity(np.zeros(4), np.random.default_rng(0).normal(size=4)) == 0.0

    def test_matches_explicit_sum(self) -> None:
        rng = np.random.default_rng(0)
        q, p = rng.normal(size=32), rng.normal(size=32)
        assert abs(similarity(q, p) - sum(a * b for a, b in zip(q, p))) < 1e-12

    def test_length_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            similarity(np.zeros(3), np.zeros(4))


class TestInBatchNll:
    def test_uniform_scores(self) -> None:
        loss = nll_in_batch(Tensor(np.zeros((4, 3))), Tensor(np.zeros((4, 3))))
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_single_row_is_zero(self) -> None:
        rng = np.random.default_rng(0)
        loss = nll_in_batch(Tensor(rng.normal(size=(1, 5))), Tensor(rng.normal(size=(1, 5))))
        assert loss.item() == 0.0

    def test_matches_naive_computation(self) -> None:
        rng = np.random.default_rng(1)
        q, p = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        assert abs(nll_in_batch(Tensor(q), Tensor(p)).item() - naive_nll(q, p)) < 1e-10

    def test_non_negative(self) -> None:
        rng = np.random.default_rng(2)
        for _ in range(20):
            q, p = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
            assert nll_in_batch(Tensor(q), Tensor(p)).item() >= 0.0

    def test_shape_mismatch(self) -> None:
        with pytest.raises(DimensionError):
            nll_in_batch(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))))

    def test_non_finite_scores_name_the_row(self) -> None:
        q = np.array([[1.0, 0.0], [np.inf, 0.0]])
        p = np.eye(2)
        with pytest.raises(NumericalFault) as e:
            nll_in_batch(Tensor(q), Tensor(p))
        assert e.value.op == "score_matrix"
        assert e.value.row == 1


class TestDistillationLoss:
    @pytest.fixture()
    def batches(self):
        rng = np.random.default_rng(3)
        student = Batch(Tensor(rng.normal(size=(6, 4)), requires_grad=True), Tensor(rng.normal(size=(6, 4))))
        teacher = Batch(
            Tensor(rng.normal(size=(6, 4)), requires_grad=True), Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        )
        return student, teacher

    def test_zero_weights_give_the_plain_loss(self, batches) -> None:
        student, _ = batches
        plain = nll_in_batch(student.question_vecs, student.positive_passage_vecs).item()
        assert total_loss(student, None, KDWeights(0.0, 0.0)).item() == plain

    def test_matches_naive_computation(self, batches) -> None:
        student, teacher = batches
        qs, ps = student.question_vecs.data, student.positive_passage_vecs.data
        qt, pt = teacher.question_vecs.data, teacher.positive_passage_vecs.data
        expected = naive_nll(qs, ps) + 0.3 * naive_nll(qs, pt) + 0.7 * naive_nll(qt, ps)
        assert abs(total_loss(student, teacher, KDWeights(0.3, 0.7)).item() - expected) < 1e-10

    def test_identical_teacher_doubles_the_loss(self, batches) -> None:
        student, _ = batches
        copy = Batch(Tensor(student.question_vecs.data.copy()), Tensor(student.positive_passage_vecs.data.copy()))
        plain = nll_in_batch(student.question_vecs, student.positive_passage_vecs).item()
        assert abs(total_loss(student, copy, KDWeights(0.5, 0.5)).item() - 2 * plain) < 1e-12

    def test_terms(self, batches) -> None:
        student, teacher = batches
        _, terms = total_loss_terms(student, teacher, KDWeights(0.5, 0.0))
        assert terms.nll_st is not None and terms.nll_ts is None
        assert abs(terms.total - (terms.nll_ss + 0.5 * terms.nll_st)) < 1e-12

    def test_monotone_in_alpha(self, batches) -> None:
        student, teacher = batches
        values = [total_loss(student, teacher, KDWeights(a, 0.0)).item() for a in (0.0, 0.5, 1.0)]
        assert values[0] <= values[1] <= values[2]

    def test_teacher_receives_no_gradient(self, batches) -> None:
        student, teacher = batches
        total_loss(student, teacher, KDWeights(0.5, 0.5)).backward()
        assert student.question_vecs.grad is not None
        assert teacher.question_vecs.grad is None
        assert teacher.positive_passage_vecs.grad is None

    def test_missing_teacher(self, batches) -> None:
        student, _ = batches
        with pytest.raises(ConfigError):
            total_loss(student, None, KDWeights(0.5, 0.0))

    def test_misaligned_teacher(self, batches) -> None:
        student, _ = batches
        short = Batch(Tensor(np.zeros((5, 4))), Tensor(np.zeros((5, 4))))
        with pytest.raises(DimensionError):
            total_loss(student, short, KDWeights(0.5, 0.5))

    def test_invalid_weights(self) -> None:
        with pytest.raises(ConfigError):
            KDWeights(-0.1, 0.5)
        with pytest.raises(ConfigError):
            KDWeights(0.5, float("nan"))
