"""
Training of the cascading teacher, the end-to-end student and the cascading student, with warmup, gradient clipping,
dev-set checkpoint selection and checkpoint files.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from tqdm.auto import tqdm

from speechqa.dpr.base import ConfigError, DataError, DivergenceError, NumericalFault, PathError
from speechqa.dpr.corpus import Corpus, Question
from speechqa.dpr.encoders import EncoderConfig, InputKind, RetrieverModel, build_retriever
from speechqa.dpr.evaluation import evaluate_topk
from speechqa.dpr.losses import Batch, KDWeights, LossTerms, total_loss_terms
from speechqa.dpr.numerics import Parameter, no_grad, stack
from speechqa.dpr.retrieval import ModelInput, model_input
from speechqa.dpr.util import append_jsonl, make_rng


@dataclass
class TrainConfig:
    """
    Hyperparameters of one training run. The defaults are desk-scale; the published ones are in ``paper.profile``.

    :param eval_every: Dev evaluation interval in steps. 0 means once per epoch.
    :param schedule: ``"constant"`` or ``"linear"`` (decay to 0 at the last step) after the warmup.
    :param max_steps: Stop after this many steps. 0 means no limit besides ``epochs``.
    """

    batch_size: int = 16
    learning_rate: float = 1e-3
    warmup_steps: int = 50
    epochs: int = 30
    alpha: float = 0.5
    beta: float = 0.5
    seed: int = 0
    eval_every: int = 0
    eval_k: int = 20
    schedule: str = "constant"
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_steps: int = 0
    processes: int = 1

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2 for in-batch negatives, got {self.batch_size}")
        if self.learning_rate <= 0 or self.warmup_steps < 0 or self.epochs < 1:
            raise ConfigError(f"Invalid learning rate, warmup or epochs in {self}")
        if self.eval_every < 0 or self.eval_k < 1 or self.max_steps < 0:
            raise ConfigError(f"Invalid evaluation or step settings in {self}")
        if self.schedule not in ("constant", "linear"):
            raise ConfigError(f"Unknown schedule {self.schedule}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ConfigError("Invalid Adam moment settings")
        KDWeights(self.alpha, self.beta)

    def kd_weights(self) -> KDWeights:
        return KDWeights(self.alpha, self.beta)


@dataclass
class Checkpoint:
    step: int
    parameters: Dict[str, np.ndarray]
    dev_topk: float
    fingerprint: str
    epoch: int = 0


@dataclass
class TrainResult:
    """
    :param model: The trained model, holding the parameters of the best checkpoint.
    :param best: The checkpoint with the highest dev top-K accuracy.
    :param history: One record per step, as in ``train_log.jsonl``.
    """

    model: RetrieverModel
    best: Checkpoint
    history: List[Dict] = field(default_factory=list)


class Adam:
    """
    Adaptive moment estimation without weight decay. Frozen parameters and parameters without a gradient are skipped.
    """

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.tensor.grad
            if p.frozen or g is None:
                continue
            m[:] = self.beta1 * m + (1 - self.beta1) * g
            v[:] = self.beta2 * v + (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            p.tensor.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """
    Scale all gradients down so their global L2 norm is at most ``max_norm`` (no-op for ``max_norm <= 0``).

    :return: The norm before clipping.
    """
    grads = [p.tensor.grad for p in params if p.tensor.grad is not None]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int | None = None) -> float:
    """
    The learning rate at a step: a linear ramp from 0 to ``cfg.learning_rate`` over the warmup steps, then constant,
    or a linear decay to 0 at ``total_steps`` if ``cfg.schedule`` is ``"linear"``.
    """
    if step < 0:
        raise ValueError(f"Negative step {step}")
    lr = cfg.learning_rate
    if step < cfg.warmup_steps:
        return lr * step / cfg.warmup_steps
    if cfg.schedule == "linear" and total_steps is not None and total_steps > cfg.warmup_steps:
        return lr * max(0.0, (total_steps - step) / (total_steps - cfg.warmup_steps))
    return lr


def _encode_batch(model: RetrieverModel, questions: Sequence[Question], inputs: Dict[str, ModelInput]) -> Batch:
    q = stack([model.encode_question(inputs[x.id]) for x in questions])
    p = stack([model.encode_passage(inputs[x.gold_passage_id]) for x in questions])
    return Batch(q, p)


class _InputCache:
    """Model inputs of the training utterances, computed once per run."""

    def __init__(self, corpus: Corpus, kind: InputKind):
        self.corpus = corpus
        self.kind = kind
        self.items: Dict[str, ModelInput] = {}

    def for_batch(self, questions: Sequence[Question]) -> Dict[str, ModelInput]:
        for q in questions:
            for uid in (q.id, q.gold_passage_id):
                if uid not in self.items:
                    self.items[uid] = model_input(self.corpus, uid, self.kind)
        return self.items


def train_step(
    model: RetrieverModel,
    questions: Sequence[Question],
    student_inputs: Dict[str, ModelInput],
    optimizer: Adam,
    lr: float,
    step: int,
    cfg: TrainConfig,
    weights: KDWeights,
    teacher: RetrieverModel | None = None,
    teacher_inputs: Dict[str, ModelInput] | None = None,
) -> Tuple[LossTerms, float]:
    """
    One optimization step on one batch.

    :return: The loss terms and the gradient norm before clipping.
    """
    model.zero_grad()
    student = _encode_batch(model, questions, student_inputs)
    teacher_batch = None
    if teacher is not None and weights.uses_teacher:
        assert teacher_inputs is not None
        with no_grad():
            teacher_batch = _encode_batch(teacher, questions, teacher_inputs)
    try:
        loss, terms = total_loss_terms(student, teacher_batch, weights)
    except NumericalFault as e:
        raise DivergenceError(str(e), step) from e
    if not np.isfinite(terms.total):
        raise DivergenceError(f"Loss is {terms.total}", step)
    loss.backward()
    grad_norm = clip_grad_norm(model.parameters(), cfg.clip_norm)
    optimizer.step(lr)
    return terms, grad_norm


def _fit(
    model: RetrieverModel,
    corpus: Corpus,
    cfg: TrainConfig,
    weights: KDWeights,
    teacher: RetrieverModel | None,
    name: str,
    log_path: Path | None,
    progress_callback: None | Callable[[float], None],
) -> TrainResult:
    logger = logging.getLogger(__name__)
    cfg.validate()
    train = corpus.split("train")
    steps_per_epoch = len(train) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigError(f"{len(train)} training questions do not fill one batch of {cfg.batch_size}")
    total_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps > 0:
        total_steps = min(total_steps, cfg.max_steps)
    eval_every = cfg.eval_every or steps_per_epoch

    optimizer = Adam(model.parameters(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    student_inputs = _InputCache(corpus, model.input_kind)
    teacher_inputs = _InputCache(corpus, InputKind.TOKENS)
    history: List[Dict] = []
    best: Checkpoint | None = None
    step = 0

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("", encoding="utf-8")

    with tqdm(total=total_steps, desc=f"Training {name}") as bar:
        for epoch in range(cfg.epochs):
            order = make_rng(cfg.seed, "batches", name, epoch).permutation(len(train))
            for b in range(steps_per_epoch):
                batch = [train[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
                lr = lr_schedule(step + 1, cfg, total_steps)
                t_inputs = teacher_inputs.for_batch(batch) if teacher is not None and weights.uses_teacher else None
                terms, grad_norm = train_step(
                    model,
                    batch,
                    student_inputs.for_batch(batch),
                    optimizer,
                    lr,
                    step + 1,
                    cfg,
                    weights,
                    teacher,
                    t_inputs,
                )
                step += 1
                record = {
                    "step": step,
                    "epoch": epoch,
                    "lr": lr,
                    "loss": terms.total,
                    "nll_ss": terms.nll_ss,
                    "nll_st": terms.nll_st,
                    "nll_ts": terms.nll_ts,
                    "grad_norm": grad_norm,
                }
                logger.debug(f"{name} step {step}: {record}")

                if step % eval_every == 0 or step == total_steps:
                    dev = evaluate_topk(model, corpus, "dev", cfg.eval_k, processes=cfg.processes).top_k_accuracy
                    record["dev_topk"] = dev
                    logger.info(f"{name} step {step} (epoch {epoch}): dev top-{cfg.eval_k} {dev:.4f}")
                    if best is None or dev > best.dev_topk:
                        best = Checkpoint(step, model.state_dict(), dev, model.fingerprint(), epoch)
                        logger.info(f"{name}: new best checkpoint at step {step}")

                history.append(record)
                if log_path is not None:
                    append_jsonl(log_path, record)
                bar.update(1)
                if progress_callback is not None:
                    progress_callback(step / total_steps)
                if step == total_steps:
                    break
            if step == total_steps:
                break

    assert best is not None
    model.load_state_dict(best.parameters)
    logger.info(f"{name}: best dev top-{cfg.eval_k} {best.dev_topk:.4f} at step {best.step}")
    return TrainResult(model=model, best=best, history=history)


def train_teacher(
    corpus: Corpus,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    log_path: Path | None = None,
    progress_callback: None | Callable[[float], None] = None,
) -> TrainResult:
    """
    Train the cascading teacher: a token-input bi-encoder on the channel transcripts, with in-batch negatives only.

    :param corpus: The corpus. Its transcripts are the teacher's input.
    :param cfg: The hyperparameters. ``alpha`` and ``beta`` are ignored.
    :param encoder_cfg: The encoder sizes.
    :param log_path: If given, the step records are written there as line-delimited JSON.
    :return: The trained model at its best dev checkpoint, with the training history.
    """
    model = build_retriever(
        InputKind.TOKENS,
        encoder_cfg or EncoderConfig(),
        cfg.seed,
        vocab_size=corpus.vocabulary.size,
        unk_id=corpus.vocabulary.unk_id,
    )
    return _fit(model, corpus, cfg, KDWeights(0.0, 0.0), None, "teacher", log_path, progress_callback)


def train_student(
    corpus: Corpus,
    teacher: RetrieverModel | None,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    input_kind: InputKind = InputKind.FRAMES,
    name: str = "student",
    log_path: Path | None = None,
    progress_callback: None | Callable[[float], None] = None,
) -> TrainResult:
    """
    Train a student with in-batch negatives plus distillation from a frozen teacher. The teacher reads the
    transcripts, the student reads frames (or transcripts, for the cascading student) of the same utterances.

    :param teacher: The frozen teacher. It may be None only if ``cfg.alpha`` and ``cfg.beta`` are both 0.
    :param input_kind: What the student reads.
    :return: The trained student at its best dev checkpoint.
    """
    logger = logging.getLogger(__name__)
    weights = cfg.kd_weights()
    if weights.uses_teacher and teacher is None:
        raise ConfigError(f"alpha={cfg.alpha}, beta={cfg.beta} require a teacher")
    if teacher is not None and teacher.input_kind is not InputKind.TOKENS:
        raise ConfigError("The teacher must be a token-input retriever")

    fingerprint = None
    if teacher is not None:
        if not teacher.frozen:
            logger.info("Freezing the teacher")
            teacher.freeze()
        fingerprint = teacher.fingerprint()

    match input_kind:
        case InputKind.FRAMES:
            first = corpus.passage_ids[0]
            model = build_retriever(
                InputKind.FRAMES,
                encoder_cfg or EncoderConfig(),
                cfg.seed,
                feature_dim=corpus.frames(first).feature_dim,
            )
        case InputKind.TOKENS:
            model = build_retriever(
                InputKind.TOKENS,
                encoder_cfg or EncoderConfig(),
                cfg.seed,
                vocab_size=corpus.vocabulary.size,
                unk_id=corpus.vocabulary.unk_id,
            )
        case _:
            raise ConfigError(f"Unknown input kind {input_kind}")

    result = _fit(model, corpus, cfg, weights, teacher, name, log_path, progress_callback)

    if teacher is not None and teacher.fingerprint() != fingerprint:
        raise ConfigError("The teacher's parameters changed during student training")
    return result


def train_cascading_student(
    corpus: Corpus,
    teacher: RetrieverModel,
    cfg: TrainConfig,
    encoder_cfg: EncoderConfig | None = None,
    log_path: Path | None = None,
    progress_callback: None | Callable[[float], None] = None,
) -> TrainResult:
    """
    A token-input student distilled from the teacher with the same objective and hyperparameters as the end-to-end
    student. It shows how much of the student's behaviour is due to distillation rather than to reading speech.
    """
    return train_student(
        corpus, teacher, cfg, encoder_cfg, InputKind.TOKENS, "cascading-student", log_path, progress_callback
    )


def save_checkpoint(
    model: RetrieverModel,
    directory: Path | str,
    step: int = 0,
    dev_topk: float | None = None,
    config_hash: str = "",
) -> Path:
    """
    Write ``params.bin`` and ``manifest.json`` into ``directory``. The parameters are stored as little-endian float64
    in sorted name order; the manifest records names, shapes and byte offsets.

    :return: The directory.
    """
    logger = logging.getLogger(__name__)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    entries = []
    offset = 0
    with open(directory / "params.bin", "wb") as f:
        for name in sorted(state):
            data = np.ascontiguousarray(state[name], dtype="<f8").tobytes()
            entries.append({"name": name, "shape": list(state[name].shape), "offset": offset})
            f.write(data)
            offset += len(data)
    manifest = {
        "format_version": 1,
        "input_kind": model.input_kind.value,
        "encoder": asdict(model.config),
        "vocab_size": model.vocab_size,
        "feature_dim": model.feature_dim,
        "unk_id": _unk_id(model),
        "parameters": entries,
        "step": step,
        "dev_topk": dev_topk,
        "fingerprint": model.fingerprint(),
        "config_hash": config_hash,
    }
    with open(directory / "manifest.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Saved checkpoint to {directory}")
    return directory


def _unk_id(model: RetrieverModel) -> int:
    embedder = getattr(model.question_encoder, "embedder", None)
    return embedder.unk_id if embedder is not None else 0


def load_checkpoint(directory: Path | str) -> Tuple[RetrieverModel, Dict]:
    """
    Load a model written by :func:`save_checkpoint`.

    :return: The model and the manifest.
    """
    directory = Path(directory)
    if not (directory / "manifest.json").is_file() or not (directory / "params.bin").is_file():
        raise PathError(f"{directory} is not a checkpoint directory")
    with open(directory / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    try:
        encoder_fields = dict(manifest["encoder"])
        encoder_fields["kernel_sizes"] = tuple(encoder_fields["kernel_sizes"])
        encoder_fields["strides"] = tuple(encoder_fields["strides"])
        model = build_retriever(
            InputKind(manifest["input_kind"]),
            EncoderConfig(**encoder_fields),
            0,
            vocab_size=manifest["vocab_size"],
            feature_dim=manifest["feature_dim"],
            unk_id=manifest["unk_id"],
        )
        raw = (directory / "params.bin").read_bytes()
        state = {}
        for entry in manifest["parameters"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            values = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
            state[entry["name"]] = values.reshape(entry["shape"]).astype(np.float64)
        model.load_state_dict(state)
    except (KeyError, TypeError, ValueError) as e:
        err = DataError(f"Corrupt checkpoint in {directory}")
        err.add_note(str(e))
        raise err from e
    if model.fingerprint() != manifest.get("fingerprint"):
        raise DataError(f"Checkpoint in {directory} does not match its recorded fingerprint")
    return model, manifest
