import pytest

import speechqa.dpr.config as config
from speechqa.dpr.base import ConfigError, PathError
from speechqa.dpr.config import (
    CONFIG_ENV,
    PROFILE_ENV,
    load_profile,
    parse_assignments,
    parse_overrides,
    resolve_config,
)


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch) -> None:
    monkeypatch.delenv(CONFIG_ENV, raising=False)
    monkeypatch.delenv(PROFILE_ENV, raising=False)


class TestProfiles:
    def test_desk_inherits_the_published_objective(self) -> None:
        cfg = resolve_config()
        assert cfg.profile == "desk"
        assert cfg.encoder.model_dim == 32
        assert cfg.teacher.learning_rate == 1e-3
        assert (cfg.student.alpha, cfg.student.beta) == (0.5, 0.5)
        assert (cfg.teacher.alpha, cfg.teacher.beta) == (0.0, 0.0)
        assert cfg.k == 20
        paper = load_profile("paper")
        assert load_profile("desk")[: len(paper)] == paper

    def test_paper_profile(self) -> None:
        cfg = resolve_config("paper")
        assert cfg.encoder.model_dim == 768
        assert cfg.teacher.batch_size == 64
        assert cfg.student.warmup_steps == 500

    def test_noisy_profile(self) -> None:
        cfg = resolve_config("desk-noisy")
        assert cfg.channel.rate_range == (0.0, 0.8)
        assert cfg.encoder.model_dim == 32

    def test_profile_from_environment(self, monkeypatch) -> None:
        monkeypatch.setenv(PROFILE_ENV, "desk-noisy")
        assert resolve_config().profile == "desk-noisy"

    def test_unknown_profile(self) -> None:
        with pytest.raises(ConfigError):
            resolve_config("cluster")

    def test_inheritance_cycle(self, monkeypatch, tmp_path) -> None:
        (tmp_path / "a.profile").write_text("inherit = b\n", encoding="utf-8")
        (tmp_path / "b.profile").write_text("k = 5\ninherit = a\n", encoding="utf-8")
        monkeypatch.setattr(config, "PROFILE_DIR", tmp_path)
        with pytest.raises(ConfigError, match="cycle"):
            load_profile("a")


class TestParsing:
    def test_assignments(self) -> None:
        text = "# comment\n\nteacher.epochs = 3  # trailing\nk=5\n"
        assert parse_assignments(text, "test") == [("teacher.epochs", "3"), ("k", "5")]

    def test_line_without_value(self) -> None:
        with pytest.raises(ConfigError, match="test:2"):
            parse_assignments("k = 5\nteacher.epochs\n", "test")

    def test_overrides_with_tuples(self) -> None:
        assert parse_overrides("teacher.epochs=2,channel.rate_range=0.1,0.5,seed=3") == [
            ("teacher.epochs", "2"),
            ("channel.rate_range", "0.1,0.5"),
            ("seed", "3"),
        ]
        assert parse_overrides(None) == []
        with pytest.raises(ConfigError):
            parse_overrides("oops,k=3")


class TestResolution:
    def test_overrides(self) -> None:
        cfg = resolve_config(overrides="teacher.epochs=2,channel.rate_range=0.1,0.5,encoder.use_positions=false")
        assert cfg.teacher.epochs == 2
        assert cfg.channel.rate_range == (0.1, 0.5)
        assert cfg.encoder.use_positions is False

    def test_mapping_overrides(self) -> None:
        assert resolve_config(overrides={"student.epochs": 4}).student.epochs == 4

    def test_flags_win_and_propagate(self) -> None:
        cfg = resolve_config(overrides="seed=3,processes=2", seed=7, corpus_dir=None)
        assert cfg.seed == 7
        assert {cfg.corpus.seed, cfg.featurizer.seed, cfg.channel.seed, cfg.teacher.seed, cfg.student.seed} == {7}
        assert cfg.teacher.processes == cfg.student.processes == 2
        assert cfg.corpus_dir == "work/corpus"

    def test_config_file(self, tmp_path) -> None:
        path = tmp_path / "run.conf"
        path.write_text("teacher.epochs = 4\nk = 10\n", encoding="utf-8")
        cfg = resolve_config(config_file=str(path), overrides="k=7")
        assert cfg.teacher.epochs == 4
        assert cfg.k == 7

    def test_config_file_from_environment(self, monkeypatch, tmp_path) -> None:
        path = tmp_path / "run.conf"
        path.write_text("student.epochs = 9\n", encoding="utf-8")
        monkeypatch.setenv(CONFIG_ENV, str(path))
        assert resolve_config().student.epochs == 9

    def test_missing_config_file(self, tmp_path) -> None:
        with pytest.raises(PathError):
            resolve_config(config_file=str(tmp_path / "missing.conf"))

    @pytest.mark.parametrize(
        "overrides", ["teacher.nope=1", "nope.epochs=1", "profile=paper", "teacher=1", "teacher.epochs=two"]
    )
    def test_rejected_overrides(self, overrides: str) -> None:
        with pytest.raises(ConfigError):
            resolve_config(overrides=overrides)

    def test_validation(self) -> None:
        with pytest.raises(ConfigError):
            resolve_config(k=0)
        with pytest.raises(ConfigError):
            resolve_config(overrides="student.batch_size=1")

    def test_hash(self) -> None:
        assert resolve_config().config_hash() == resolve_config().config_hash()
        assert resolve_config().config_hash() != resolve_config(seed=1).config_hash()
        assert "teacher.epochs=30" in resolve_config().listing()
