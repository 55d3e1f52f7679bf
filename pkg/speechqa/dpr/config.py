"""
Run configuration: the dataclasses of all modules bundled into one :class:`RunConfig`, resolved from built-in
defaults, a profile chain, an optional config file and command line overrides.

Profile and config files hold ``key = value`` lines. ``#`` starts a comment, keys are dotted (``teacher.epochs``) and
``inherit = <profile>`` pulls in another profile first.
"""
import logging
import os
import typing
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, List, Mapping, Tuple

from speechqa.dpr.base import ConfigError, PathError
from speechqa.dpr.corpus import CorpusConfig, ErrorChannelConfig, FeaturizerConfig
from speechqa.dpr.encoders import EncoderConfig
from speechqa.dpr.evaluation import ReaderConfig
from speechqa.dpr.trainer import TrainConfig
from speechqa.dpr.util import sha256_text

PROFILE_DIR = Path(__file__).parent / "profiles"
DEFAULT_PROFILE = "desk"
CONFIG_ENV = "SPEECHDPR_CONFIG"
PROFILE_ENV = "SPEECHDPR_PROFILE"

SECTIONS = ("corpus", "featurizer", "channel", "encoder", "teacher", "student", "reader")


@dataclass
class RunConfig:
    """
    Everything one invocation of the command line needs.

    The run seed is copied into the seed of every section when the configuration is resolved, so one number controls
    all randomness of a run.
    """

    profile: str = DEFAULT_PROFILE
    seed: int = 0
    k: int = 20
    processes: int = 1
    corpus_dir: str = "work/corpus"
    checkpoint_dir: str = "work/checkpoints"
    index_dir: str = "work/index"
    report_dir: str = "work/reports"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    channel: ErrorChannelConfig = field(default_factory=ErrorChannelConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=TrainConfig)
    reader: ReaderConfig = field(default_factory=ReaderConfig)

    def listing(self) -> List[str]:
        """The resolved configuration as sorted ``key=value`` lines. The profile name is not part of it."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "profile":
                continue
            if is_dataclass(value):
                for sub in fields(value):
                    lines.append(f"{f.name}.{sub.name}={_format(getattr(value, sub.name))}")
            else:
                lines.append(f"{f.name}={_format(value)}")
        return sorted(lines)

    def config_hash(self) -> str:
        return sha256_text("\n".join(self.listing()))

    def propagate_seed(self) -> None:
        for section in (self.corpus, self.featurizer, self.channel, self.teacher, self.student):
            section.seed = self.seed

    def set_processes(self) -> None:
        self.teacher.processes = self.processes
        self.student.processes = self.processes

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")
        if self.processes < 1:
            raise ConfigError(f"processes must be at least 1, got {self.processes}")
        self.corpus.validate()
        self.featurizer.validate()
        self.channel.validate()
        self.encoder.validate()
        self.teacher.validate()
        self.student.validate()
        self.reader.validate()


def _format(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_scalar(text: str, kind: type, key: str) -> Any:
    text = text.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            return text
    except ValueError:
        raise ConfigError(f"Cannot parse {text!r} as {kind.__name__} for {key}") from None
    raise ConfigError(f"Unsupported type {kind} for {key}")


def parse_value(text: str, annotation: Any, key: str) -> Any:
    """
    Convert the text of a configuration value to the type of a dataclass field. Tuples are written comma-separated.
    """
    if typing.get_origin(annotation) is tuple:
        args = typing.get_args(annotation)
        parts = [p for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(p, args[0], key) for p in parts)
        if len(parts) != len(args):
            raise ConfigError(f"{key} expects {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(p, a, key) for p, a in zip(parts, args))
    return _parse_scalar(text, annotation, key)


def parse_assignments(text: str, source: str) -> List[Tuple[str, str]]:
    """
    Parse ``key = value`` lines. Blank lines and ``#`` comments are skipped.

    :param source: Named in error messages.
    """
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out.append((key.strip(), value.strip()))
    return out


def parse_overrides(text: str | Mapping[str, Any] | None) -> List[Tuple[str, str]]:
    """
    Parse command line overrides, ``"teacher.epochs=2,corpus.num_passages=100"``. Values of tuple fields contain
    commas themselves, so a part without ``=`` continues the previous value.
    """
    if text is None:
        return []
    if isinstance(text, Mapping):
        return [(str(k), _format(v)) for k, v in text.items()]
    out: List[Tuple[str, str]] = []
    for part in str(text).split(","):
        if "=" in part:
            key, value = part.split("=", 1)
            out.append((key.strip(), value.strip()))
        elif out:
            key, value = out[-1]
            out[-1] = (key, f"{value},{part.strip()}")
        elif part.strip():
            raise ConfigError(f"Cannot parse override {part!r}, expected key=value")
    return out


def apply_assignment(cfg: RunConfig, key: str, value: str) -> None:
    """Set one dotted key of ``cfg`` from its text value."""
    parts = key.split(".")
    if len(parts) == 1:
        target: Any = cfg
        name = parts[0]
    elif len(parts) == 2 and parts[0] in SECTIONS:
        target = getattr(cfg, parts[0])
        name = parts[1]
    else:
        raise ConfigError(f"Unknown configuration key {key}")
    hints = typing.get_type_hints(type(target))
    if name not in hints or name == "profile" or is_dataclass(getattr(target, name, None)):
        raise ConfigError(f"Unknown configuration key {key}")
    setattr(target, name, parse_value(value, hints[name], key))


def profile_path(name: str) -> Path:
    path = PROFILE_DIR / f"{name}.profile"
    if not path.is_file():
        available = sorted(p.stem for p in PROFILE_DIR.glob("*.profile"))
        raise ConfigError(f"Unknown profile {name}, available: {', '.join(available)}")
    return path


def _expand(path: Path, source: str, seen: Tuple[str, ...]) -> List[Tuple[str, str]]:
    if source in seen:
        raise ConfigError(f"Profile inheritance cycle: {' -> '.join(seen + (source,))}")
    assignments = parse_assignments(path.read_text(encoding="utf-8"), str(path))
    out: List[Tuple[str, str]] = []
    for key, value in assignments:
        if key == "inherit":
            out += _expand(profile_path(value), value, seen + (source,))
        else:
            out.append((key, value))
    return out


def load_profile(name: str) -> List[Tuple[str, str]]:
    """The assignments of a shipped profile, with inherited profiles expanded first."""
    return _expand(profile_path(name), name, ())


def load_config_file(path: Path | str) -> List[Tuple[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise PathError(f"Config file {path} does not exist")
    return _expand(path, str(path), ())


def resolve_config(
    profile: str | None = None,
    config_file: str | None = None,
    overrides: str | Mapping[str, Any] | None = None,
    **flags: Any,
) -> RunConfig:
    """
    Build the configuration of a run. Later sources win: dataclass defaults, the profile chain, the config file, the
    overrides, then the dedicated flags (those that are not None).

    :param profile: A shipped profile. Defaults to ``$SPEECHDPR_PROFILE`` or ``desk``.
    :param config_file: A file in the profile format. Defaults to ``$SPEECHDPR_CONFIG`` if set.
    :param overrides: ``key=value`` pairs, comma-separated.
    :param flags: Top-level keys such as ``seed``, ``k`` or ``corpus_dir``.
    """
    logger = logging.getLogger(__name__)
    profile = profile or os.getenv(PROFILE_ENV) or DEFAULT_PROFILE
    config_file = config_file or os.getenv(CONFIG_ENV)

    cfg = RunConfig(profile=profile)
    assignments = load_profile(profile)
    if config_file:
        assignments += load_config_file(config_file)
    assignments += parse_overrides(overrides)
    assignments += [(k, _format(v)) for k, v in flags.items() if v is not None]

    for key, value in assignments:
        apply_assignment(cfg, key, value)
    cfg.propagate_seed()
    cfg.set_processes()
    cfg.validate()
    logger.debug(f"Resolved configuration {cfg.config_hash()[:12]} from profile {profile}")
    return cfg
