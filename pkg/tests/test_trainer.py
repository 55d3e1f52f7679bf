import json
import os

import numpy as np
import pytest

from speechqa.dpr.base import ConfigError, DataError, PathError
from speechqa.dpr.corpus import Corpus
from speechqa.dpr.encoders import InputKind, build_retriever
from speechqa.dpr.evaluation import evaluate_topk
from speechqa.dpr.numerics import Parameter
from speechqa.dpr.trainer import (
    Adam,
    TrainConfig,
    clip_grad_norm,
    load_checkpoint,
    lr_schedule,
    save_checkpoint,
    train_cascading_student,
    train_student,
    train_teacher,
)
from speechqa.dpr.util import read_jsonl
from tests.base import tiny_encoder_config, tiny_train_config


class TestSchedule:
    def test_warmup(self) -> None:
        cfg = TrainConfig(learning_rate=1.0, warmup_steps=10)
        assert lr_schedule(0, cfg) == 0.0
        assert lr_schedule(5, cfg) == pytest.approx(0.5)
        assert lr_schedule(10, cfg) == 1.0
        assert lr_schedule(1000, cfg, 20) == 1.0

    def test_linear_decay(self) -> None:
        cfg = TrainConfig(learning_rate=1.0, warmup_steps=10, schedule="linear")
        assert lr_schedule(15, cfg, 20) == pytest.approx(0.5)
        assert lr_schedule(20, cfg, 20) == 0.0

    def test_without_warmup(self) -> None:
        assert lr_schedule(0, TrainConfig(learning_rate=0.1, warmup_steps=0)) == 0.1

    def test_negative_step(self) -> None:
        with pytest.raises(ValueError):
            lr_schedule(-1, TrainConfig())

    @pytest.mark.parametrize(
        "kwargs", [dict(batch_size=1), dict(learning_rate=0.0), dict(epochs=0), dict(schedule="cosine"), dict(alpha=-1)]
    )
    def test_invalid_config(self, kwargs) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()


class TestOptimizer:
    def test_first_adam_step_moves_by_the_learning_rate(self) -> None:
        p = Parameter.create("w", np.array([1.0, -2.0]))
        p.tensor.grad = np.array([4.0, -0.5])
        optimizer = Adam([p])
        optimizer.step(0.1)
        assert np.allclose(p.data, [0.9, -1.9])
        assert optimizer.t == 1

    def test_frozen_and_gradient_free_parameters_stay(self) -> None:
        frozen = Parameter.create("frozen", np.ones(3))
        frozen.freeze()
        frozen.tensor.grad = np.ones(3)
        idle = Parameter.create("idle", np.ones(3))
        Adam([frozen, idle]).step(1.0)
        assert np.array_equal(frozen.data, np.ones(3))
        assert np.array_equal(idle.data, np.ones(3))

    def test_clip_grad_norm(self) -> None:
        a, b = Parameter.create("a", np.zeros(1)), Parameter.create("b", np.zeros(1))
        a.tensor.grad, b.tensor.grad = np.array([3.0]), np.array([4.0])
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
        assert np.allclose([a.tensor.grad[0], b.tensor.grad[0]], [0.6, 0.8])

    def test_clip_grad_norm_disabled(self) -> None:
        a = Parameter.create("a", np.zeros(2))
        a.tensor.grad = np.array([30.0, 40.0])
        assert clip_grad_norm([a], 0.0) == pytest.approx(50.0)
        assert np.array_equal(a.tensor.grad, [30.0, 40.0])


class TestTraining:
    @staticmethod
    def progress_callback(progress: float) -> None:
        assert 0.0 <= progress <= 1.0

    @pytest.fixture(scope="class")
    def teacher(self, corpus: Corpus):
        return train_teacher(corpus, tiny_train_config(), tiny_encoder_config())

    def test_teacher_run(self, teacher) -> None:
        assert teacher.model.input_kind is InputKind.TOKENS
        assert [r["step"] for r in teacher.history] == [1, 2]
        assert all(np.isfinite(r["loss"]) and r["nll_st"] is None for r in teacher.history)
        assert teacher.history[0]["lr"] == pytest.approx(0.5e-3)
        evaluated = [r["dev_topk"] for r in teacher.history if "dev_topk" in r]
        assert evaluated and teacher.best.dev_topk == max(evaluated)
        assert teacher.model.fingerprint() == teacher.best.fingerprint

    def test_deterministic(self, corpus: Corpus, teacher) -> None:
        again = train_teacher(corpus, tiny_train_config(), tiny_encoder_config())
        assert again.model.fingerprint() == teacher.model.fingerprint()
        assert [r["loss"] for r in again.history] == [r["loss"] for r in teacher.history]

    def test_student_leaves_the_teacher_untouched(self, corpus: Corpus, teacher) -> None:
        fingerprint = teacher.model.fingerprint()
        result = train_student(
            corpus, teacher.model, tiny_train_config(), tiny_encoder_config(), progress_callback=self.progress_callback
        )
        assert result.model.input_kind is InputKind.FRAMES
        assert teacher.model.frozen
        assert teacher.model.fingerprint() == fingerprint
        for r in result.history:
            assert r["loss"] == pytest.approx(r["nll_ss"] + 0.5 * r["nll_st"] + 0.5 * r["nll_ts"])

    def test_cascading_student(self, corpus: Corpus, teacher) -> None:
        result = train_cascading_student(corpus, teacher.model, tiny_train_config(), tiny_encoder_config())
        assert result.model.input_kind is InputKind.TOKENS
        assert result.model.fingerprint() != teacher.model.fingerprint()

    def test_student_without_distillation(self, corpus: Corpus, tmp_path) -> None:
        log = tmp_path / "logs" / "train_log.jsonl"
        cfg = tiny_train_config(alpha=0.0, beta=0.0)
        result = train_student(corpus, None, cfg, tiny_encoder_config(), log_path=log)
        assert all(r["loss"] == r["nll_ss"] for r in result.history)
        records = list(read_jsonl(log))
        assert [r["step"] for r in records] == [1, 2]
        assert records[-1]["dev_topk"] == result.history[-1]["dev_topk"]

    def test_distillation_needs_a_teacher(self, corpus: Corpus) -> None:
        with pytest.raises(ConfigError):
            train_student(corpus, None, tiny_train_config(), tiny_encoder_config())

    def test_teacher_must_read_transcripts(self, corpus: Corpus) -> None:
        frames_model = build_retriever(InputKind.FRAMES, tiny_encoder_config(), 0, feature_dim=6)
        with pytest.raises(ConfigError):
            train_student(corpus, frames_model, tiny_train_config(), tiny_encoder_config())

    def test_batch_larger_than_the_train_split(self, corpus: Corpus) -> None:
        with pytest.raises(ConfigError):
            train_teacher(corpus, tiny_train_config(batch_size=32), tiny_encoder_config())

    @pytest.mark.slow
    @pytest.mark.skipif(not os.getenv("SPEECHDPR_SLOW"), reason="Set SPEECHDPR_SLOW=1 to run the long training tests")
    def test_teacher_learns(self, corpus: Corpus) -> None:
        untrained = build_retriever(InputKind.TOKENS, tiny_encoder_config(), 0, vocab_size=corpus.vocabulary.size)
        baseline = evaluate_topk(untrained, corpus, "dev", k=5).top_k_accuracy
        cfg = tiny_train_config(epochs=60, max_steps=0, learning_rate=3e-3, warmup_steps=10)
        result = train_teacher(corpus, cfg, tiny_encoder_config())
        losses = [r["loss"] for r in result.history]
        assert np.mean(losses[-8:]) < np.mean(losses[:8])
        assert result.best.dev_topk >= baseline


class TestCheckpointFiles:
    @pytest.fixture()
    def model(self):
        return build_retriever(InputKind.TOKENS, tiny_encoder_config(), 3, vocab_size=30, unk_id=0)

    def test_round_trip(self, model, tmp_path) -> None:
        save_checkpoint(model, tmp_path / "ckpt", step=7, dev_topk=0.25, config_hash="abc")
        loaded, manifest = load_checkpoint(tmp_path / "ckpt")
        assert loaded.fingerprint() == model.fingerprint()
        assert loaded.input_kind is InputKind.TOKENS
        assert manifest["step"] == 7 and manifest["dev_topk"] == 0.25 and manifest["config_hash"] == "abc"
        names = [p["name"] for p in manifest["parameters"]]
        assert names == sorted(names) == sorted(model.state_dict())

    def test_frame_model(self, tmp_path) -> None:
        model = build_retriever(InputKind.FRAMES, tiny_encoder_config(), 0, feature_dim=6)
        loaded, _ = load_checkpoint(save_checkpoint(model, tmp_path))
        assert loaded.feature_dim == 6
        assert loaded.fingerprint() == model.fingerprint()

    def test_saves_are_byte_identical(self, model, tmp_path) -> None:
        for name in ("a", "b"):
            save_checkpoint(model, tmp_path / name)
        for file in ("params.bin", "manifest.json"):
            assert (tmp_path / "a" / file).read_bytes() == (tmp_path / "b" / file).read_bytes()

    def test_missing(self, tmp_path) -> None:
        with pytest.raises(PathError):
            load_checkpoint(tmp_path / "nothing")

    def test_truncated_parameters(self, model, tmp_path) -> None:
        save_checkpoint(model, tmp_path)
        params = tmp_path / "params.bin"
        params.write_bytes(params.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)

    def test_fingerprint_mismatch(self, model, tmp_path) -> None:
        save_checkpoint(model, tmp_path)
        path = tmp_path / "manifest.json"
        manifest = json.loads(path.read_text(encoding="utf-8"))
        manifest["fingerprint"] = "0" * 64
        path.write_text(json.dumps(manifest), encoding="utf-8")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path)
