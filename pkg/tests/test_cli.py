import shutil
import sys

import pytest

from speechqa.dpr.cli import COMMANDS, main
from speechqa.dpr.corpus import Corpus
from speechqa.dpr.util import list_files
from tests.base import run_pipeline

TINY_RUN = ",".join(
    [
        "corpus.num_passages=40",
        "corpus.train_questions=16",
        "corpus.dev_questions=8",
        "corpus.test_questions=8",
        "corpus.num_topics=4",
        "corpus.function_tokens=6",
        "corpus.content_tokens_per_topic=8",
        "corpus.entity_tokens=30",
        "corpus.passage_speakers=4",
        "corpus.train_speakers=3",
        "corpus.dev_speakers=2",
        "corpus.test_speakers=2",
        "featurizer.frames_per_token=4",
        "featurizer.feature_dim=6",
        "encoder.model_dim=8",
        "encoder.num_layers=1",
        "encoder.num_heads=2",
        "encoder.ffn_dim=16",
        "encoder.hidden_channels=8",
        "encoder.max_positions=64",
        "teacher.batch_size=4",
        "teacher.epochs=1",
        "teacher.max_steps=2",
        "teacher.warmup_steps=2",
        "teacher.eval_k=5",
        "student.batch_size=4",
        "student.epochs=1",
        "student.max_steps=2",
        "student.warmup_steps=2",
        "student.eval_k=5",
        "k=5",
    ]
)


def run(argv, monkeypatch) -> int:
    monkeypatch.setattr(sys, "argv", ["speechqa-dpr", *argv])
    with pytest.raises(SystemExit) as e:
        main()
    return e.value.code


class TestCorpusCommand:
    def test_same_seed_same_bytes(self, tmp_path, capsys) -> None:
        for name in ("a", "b"):
            COMMANDS["gen-corpus"](set=TINY_RUN, seed=5, corpus_dir=str(tmp_path / name))
        a = list_files(tmp_path / "a")
        b = list_files(tmp_path / "b")
        assert [p.relative_to(tmp_path / "a") for p in a] == [p.relative_to(tmp_path / "b") for p in b]
        assert all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
        assert (tmp_path / "a" / "run_manifest.gen-corpus.json").is_file()
        assert "passages=40" in capsys.readouterr().out


class TestExitCodes:
    def test_unknown_key(self, tmp_path, monkeypatch) -> None:
        assert run(["gen-corpus", "--set=teacher.nope=1", f"--corpus_dir={tmp_path}"], monkeypatch) == 4

    def test_missing_corpus(self, tmp_path, monkeypatch, capsys) -> None:
        code = run(["train-teacher", f"--set={TINY_RUN}", f"--corpus_dir={tmp_path / 'none'}"], monkeypatch)
        assert code == 5
        assert "PathError" in capsys.readouterr().err

    def test_missing_checkpoint(self, tmp_path, monkeypatch) -> None:
        COMMANDS["gen-corpus"](set=TINY_RUN, corpus_dir=str(tmp_path / "corpus"))
        argv = [
            "train-cascading-student",
            f"--set={TINY_RUN}",
            f"--corpus_dir={tmp_path / 'corpus'}",
            f"--checkpoint_dir={tmp_path / 'checkpoints'}",
        ]
        assert run(argv, monkeypatch) == 5


class TestPipeline:
    @pytest.fixture(scope="class")
    def workspace(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("pipeline")
        dirs = dict(
            corpus_dir=str(root / "corpus"),
            checkpoint_dir=str(root / "checkpoints"),
            index_dir=str(root / "index"),
            report_dir=str(root / "reports"),
        )
        train_dirs = dict(corpus_dir=dirs["corpus_dir"], checkpoint_dir=dirs["checkpoint_dir"])
        COMMANDS["gen-corpus"](set=TINY_RUN, corpus_dir=dirs["corpus_dir"])
        COMMANDS["train-teacher"](set=TINY_RUN, **train_dirs)
        COMMANDS["train-student"](set=TINY_RUN, **train_dirs)
        COMMANDS["train-cascading-student"](set=TINY_RUN, **train_dirs)
        for name in ("teacher", "student"):
            COMMANDS["index"](name=name, set=TINY_RUN, **{k: v for k, v in dirs.items() if k != "report_dir"})
        return root, dirs

    def test_checkpoints(self, workspace) -> None:
        root, _ = workspace
        for name in ("teacher", "student", "cascading-student"):
            directory = root / "checkpoints" / name
            assert (directory / "manifest.json").is_file()
            assert len((directory / "train_log.jsonl").read_text(encoding="utf-8").splitlines()) == 2

    def test_search(self, workspace, capsys) -> None:
        root, dirs = workspace
        question = Corpus.load(root / "corpus").split("test")[0].id
        capsys.readouterr()
        COMMANDS["search"](question, set=TINY_RUN, **dirs)
        lines = capsys.readouterr().out.splitlines()
        assert [line.split("\t")[0] for line in lines] == ["1", "2", "3", "4", "5"]
        scores = [float(line.split("\t")[2]) for line in lines]
        assert scores == sorted(scores, reverse=True)

    def test_search_with_a_foreign_index(self, workspace, tmp_path, monkeypatch) -> None:
        root, dirs = workspace
        for suffix in ("vecs", "manifest"):
            shutil.copy(root / "index" / f"student.{suffix}", tmp_path / f"teacher.{suffix}")
        argv = [
            "search",
            "test-0000",
            "--name=teacher",
            f"--set={TINY_RUN}",
            f"--corpus_dir={dirs['corpus_dir']}",
            f"--checkpoint_dir={dirs['checkpoint_dir']}",
            f"--index_dir={tmp_path}",
        ]
        assert run(argv, monkeypatch) == 6

    def test_evaluate(self, workspace, capsys) -> None:
        root, dirs = workspace
        capsys.readouterr()
        COMMANDS["eval"](set=TINY_RUN, **dirs)
        out = capsys.readouterr().out
        for label in ("teacher", "student", "cascading-student", "teacher + student", "reader on gold passage"):
            assert label in out
        records = (root / "reports" / "eval.test.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(records) == 6

    def test_ensemble_tune(self, workspace) -> None:
        root, dirs = workspace
        COMMANDS["ensemble-tune"](set=TINY_RUN, **dirs)
        grid = (root / "reports" / "ensemble.teacher+student.jsonl").read_text(encoding="utf-8").splitlines()
        assert len(grid) == 21

    def test_wer_report(self, workspace, capsys) -> None:
        root, dirs = workspace
        capsys.readouterr()
        COMMANDS["wer-report"](set=TINY_RUN, **dirs)
        assert "rank correlation" in capsys.readouterr().out
        for name in ("teacher", "student", "cascading-student"):
            rows = (root / "reports" / f"wer_report.test.{name}.csv").read_text(encoding="utf-8").splitlines()
            assert rows[0] == "bucket_midpoint,accuracy"
            assert len(rows) == 11


class TestDeterminism:
    def test_pipeline_twice_same_bytes(self, tmp_path) -> None:
        for name in ("a", "b"):
            run_pipeline(tmp_path / name, overrides=TINY_RUN)
        a, b = list_files(tmp_path / "a"), list_files(tmp_path / "b")
        relative = [p.relative_to(tmp_path / "a").as_posix() for p in a]
        assert relative == [p.relative_to(tmp_path / "b").as_posix() for p in b]
        assert {
            "checkpoints/teacher/params.bin",
            "checkpoints/student-no-kd/params.bin",
            "index/student.vecs",
            "reports/eval.test.jsonl",
            "reports/ensemble.teacher+student.jsonl",
            "reports/wer_report.test.txt",
        } <= set(relative)
        for name, x, y in zip(relative, a, b):
            assert x.read_bytes() == y.read_bytes(), name
