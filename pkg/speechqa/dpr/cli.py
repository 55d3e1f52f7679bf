"""
The ``speechqa-dpr`` command line. Every subcommand resolves the run configuration, does its work, writes its
artifacts and a run manifest next to them. Errors of the library exit with the code of their class.
"""
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Tuple

import fire  # type: ignore

from speechqa.dpr.base import ConfigError, FingerprintMismatchError, PathError, SpeechDprError
from speechqa.dpr.config import RunConfig, resolve_config
from speechqa.dpr.corpus import SPLITS, Corpus, generate_corpus
from speechqa.dpr.encoders import RetrieverModel
from speechqa.dpr.evaluation import (
    EvaluationRow,
    format_summary,
    gold_passage_ff1,
    open_sqa_ff1,
    open_sqa_predictions,
    passage_index,
    retriever_table,
    topk_accuracy,
    tune_answer_weights,
    wer_bucket_report,
)
from speechqa.dpr.retrieval import (
    PassageIndex,
    ScoreTable,
    encode_items,
    ensemble_table,
    load_index,
    model_input,
    save_index,
    search_topk,
    tune_ensemble_weights,
)
from speechqa.dpr.trainer import (
    TrainResult,
    load_checkpoint,
    save_checkpoint,
    train_cascading_student,
    train_student,
    train_teacher,
)
from speechqa.dpr.util import setup_logging, write_jsonl, write_run_manifest

RETRIEVERS = ("teacher", "student", "cascading-student")
ENSEMBLES = (("teacher", "student"), ("teacher", "cascading-student"))
REPORTED_K = (1, 5, 20)


def _setup(
    log_level: str,
    profile: str | None,
    config: str | None,
    overrides: str | None,
    **flags: Any,
) -> RunConfig:
    setup_logging(log_level)
    return resolve_config(profile, config, overrides, **flags)


def _load_corpus(cfg: RunConfig) -> Corpus:
    return Corpus.load(cfg.corpus_dir)


def _checkpoint_dir(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.checkpoint_dir) / name


def _load_model(cfg: RunConfig, name: str) -> RetrieverModel:
    directory = _checkpoint_dir(cfg, name)
    if not directory.is_dir():
        raise PathError(f"No checkpoint {name} in {cfg.checkpoint_dir}, train it first")
    model, _ = load_checkpoint(directory)
    return model


def _available_retrievers(cfg: RunConfig) -> List[str]:
    return [name for name in RETRIEVERS if (_checkpoint_dir(cfg, name) / "manifest.json").is_file()]


def _saved_index(cfg: RunConfig, name: str, model: RetrieverModel) -> PassageIndex | None:
    """The index written by the ``index`` subcommand, if there is one. It must belong to ``model``."""
    if not (Path(cfg.index_dir) / f"{name}.manifest").is_file():
        return None
    index = load_index(cfg.index_dir, name)
    if index.encoder_fingerprint != model.fingerprint():
        raise FingerprintMismatchError(
            f"Index {name} in {cfg.index_dir} was built by a different model than checkpoint {name}, rebuild it"
        )
    return index


def _tables(cfg: RunConfig, corpus: Corpus, name: str, splits: Tuple[str, ...]) -> Dict[str, ScoreTable]:
    logger = logging.getLogger(__name__)
    model = _load_model(cfg, name)
    index = _saved_index(cfg, name, model)
    if index is None:
        logger.info(f"No saved index for {name}, encoding the archive")
        index = passage_index(model, corpus, cfg.processes)
    return {s: retriever_table(model, corpus, corpus.split(s), index, cfg.processes) for s in splits}


def _train_summary(name: str, result: TrainResult, k: int) -> None:
    print(f"{name}: best dev top-{k} accuracy {result.best.dev_topk:.4f} at step {result.best.step}")


def gen_corpus(
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Generate the synthetic spoken archive with questions, features and transcripts.

    :param profile: A shipped profile, ``desk`` by default.
    :param config: A config file in the profile format.
    :param set: Overrides, ``"key=value,key=value"``.
    :param seed: The run seed.
    :param corpus_dir: Where the corpus is written.
    :param log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL.
    """
    cfg = _setup(log_level, profile, config, set, seed=seed, corpus_dir=corpus_dir)
    corpus = generate_corpus(cfg.corpus, cfg.featurizer, cfg.channel)
    corpus.save(cfg.corpus_dir)
    write_run_manifest(cfg.corpus_dir, "gen-corpus", cfg.config_hash(), cfg.seed, profile=cfg.profile)
    summary = corpus.summary()
    print(", ".join(f"{key}={value}" for key, value in summary.items()))


def train_teacher_command(
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """Train the cascading teacher on the transcripts of the corpus."""
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        processes=processes,
    )
    corpus = _load_corpus(cfg)
    directory = _checkpoint_dir(cfg, "teacher")
    result = train_teacher(corpus, cfg.teacher, cfg.encoder, log_path=directory / "train_log.jsonl")
    save_checkpoint(result.model, directory, result.best.step, result.best.dev_topk, cfg.config_hash())
    write_run_manifest(directory, "train-teacher", cfg.config_hash(), cfg.seed, profile=cfg.profile)
    _train_summary("teacher", result, cfg.teacher.eval_k)


def train_student_command(
    no_kd: bool = False,
    name: str = "student",
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Train the end-to-end student on frames, distilled from the teacher checkpoint.

    :param no_kd: Train without distillation (alpha = beta = 0). No teacher checkpoint is needed then.
    :param name: The checkpoint name, so an ablation does not overwrite the main student.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        processes=processes,
    )
    if no_kd:
        cfg.student.alpha = 0.0
        cfg.student.beta = 0.0
    corpus = _load_corpus(cfg)
    teacher = _load_model(cfg, "teacher") if cfg.student.kd_weights().uses_teacher else None
    directory = _checkpoint_dir(cfg, name)
    result = train_student(corpus, teacher, cfg.student, cfg.encoder, name=name, log_path=directory / "train_log.jsonl")
    save_checkpoint(result.model, directory, result.best.step, result.best.dev_topk, cfg.config_hash())
    write_run_manifest(directory, "train-student", cfg.config_hash(), cfg.seed, profile=cfg.profile, no_kd=no_kd)
    _train_summary(name, result, cfg.student.eval_k)


def train_cascading_student_command(
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Train the cascading student: a transcript reader distilled from the teacher with the student's loss weights and
    the teacher's optimization settings.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        processes=processes,
    )
    corpus = _load_corpus(cfg)
    teacher = _load_model(cfg, "teacher")
    train_cfg = replace(cfg.teacher, alpha=cfg.student.alpha, beta=cfg.student.beta)
    directory = _checkpoint_dir(cfg, "cascading-student")
    result = train_cascading_student(corpus, teacher, train_cfg, cfg.encoder, log_path=directory / "train_log.jsonl")
    save_checkpoint(result.model, directory, result.best.step, result.best.dev_topk, cfg.config_hash())
    write_run_manifest(directory, "train-cascading-student", cfg.config_hash(), cfg.seed, profile=cfg.profile)
    _train_summary("cascading-student", result, train_cfg.eval_k)


def index(
    name: str = "student",
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    index_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Encode the whole archive with a trained retriever and save the index.

    :param name: The checkpoint to use. The index gets the same name.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        index_dir=index_dir,
        processes=processes,
    )
    corpus = _load_corpus(cfg)
    model = _load_model(cfg, name)
    built = passage_index(model, corpus, cfg.processes)
    vecs, _ = save_index(built, cfg.index_dir, name)
    write_run_manifest(cfg.index_dir, f"index.{name}", cfg.config_hash(), cfg.seed, profile=cfg.profile)
    print(f"Indexed {built.size} passages into {vecs}")


def search(
    question: str,
    name: str = "student",
    k: int | None = None,
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    index_dir: str | None = None,
    report_dir: str | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Print the top-k passages for one question of the corpus as ``rank, passage id, score`` lines.

    :param question: A question id such as ``test-0003``.
    :param name: The retriever. Its saved index is searched.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        k=k,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        index_dir=index_dir,
        report_dir=report_dir,
    )
    corpus = _load_corpus(cfg)
    model = _load_model(cfg, name)
    saved = _saved_index(cfg, name, model)
    if saved is None:
        raise PathError(f"No index {name} in {cfg.index_dir}, run the index subcommand first")
    corpus.question(question)
    _, vectors = encode_items(model, {question: model_input(corpus, question, model.input_kind)}, "question")
    result = search_topk(saved, vectors[0], cfg.k)
    for rank, (pid, score) in enumerate(result.hits, start=1):
        print(f"{rank}\t{pid}\t{score:.6f}")
    write_run_manifest(
        cfg.report_dir, "search", cfg.config_hash(), cfg.seed, profile=cfg.profile, question=question, retriever=name
    )


def evaluate(
    split: str = "test",
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    k: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    index_dir: str | None = None,
    report_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Top-k accuracy and open-domain FF1 of every trained retriever and of the teacher ensembles on a split. Answer and
    ensemble weights are tuned on the dev split.
    """
    logger = logging.getLogger(__name__)
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        k=k,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        index_dir=index_dir,
        report_dir=report_dir,
        processes=processes,
    )
    if split not in SPLITS:
        raise ConfigError(f"Unknown split {split}, expected one of {', '.join(SPLITS)}")
    corpus = _load_corpus(cfg)
    names = _available_retrievers(cfg)
    if not names:
        raise PathError(f"No trained retriever in {cfg.checkpoint_dir}")
    splits = ("dev", split) if split != "dev" else ("dev",)
    tables = {name: _tables(cfg, corpus, name, splits) for name in names}

    candidates: List[Tuple[str, Dict[str, ScoreTable], Tuple[float, float] | None]] = [
        (name, tables[name], None) for name in names
    ]
    dev_gold = corpus.gold(corpus.split("dev"))
    for a, b in ENSEMBLES:
        if a in tables and b in tables:
            weights, _ = tune_ensemble_weights(dev_gold, tables[a]["dev"], tables[b]["dev"], cfg.k)
            combined = {s: ensemble_table(tables[a][s], tables[b][s], weights) for s in splits}
            candidates.append((f"{a} + {b}", combined, (weights.w_a, weights.w_b)))

    ks = sorted({kk for kk in REPORTED_K if kk <= cfg.k} | {cfg.k})
    gold = corpus.gold(corpus.split(split))
    rows = []
    for label, by_split, ensemble_weights in candidates:
        table = by_split[split]
        top_k = {kk: topk_accuracy(table.results(kk), gold, kk).top_k_accuracy for kk in ks}
        answer_weights, _ = tune_answer_weights(corpus, by_split["dev"].results(cfg.k), cfg.reader, cfg.k)
        predictions = open_sqa_predictions(corpus, table.results(cfg.k), answer_weights, cfg.reader, cfg.k)
        rows.append(EvaluationRow(label, split, top_k, open_sqa_ff1(predictions, corpus), ensemble_weights))
        logger.info(f"{label}: top-{cfg.k} {top_k[cfg.k]:.4f}, FF1 {rows[-1].ff1:.4f}")
    rows.append(
        EvaluationRow("reader on gold passage", split, {}, gold_passage_ff1(corpus, corpus.split(split), cfg.reader))
    )

    report_dir = Path(cfg.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    write_jsonl(
        report_dir / f"eval.{split}.jsonl",
        [
            {
                "name": r.name,
                "split": r.split,
                "top_k": {str(kk): v for kk, v in sorted(r.top_k.items())},
                "ff1": r.ff1,
                "ensemble_weights": r.weights,
            }
            for r in rows
        ],
    )
    summary = format_summary(rows)
    (report_dir / f"eval.{split}.txt").write_text(summary, encoding="utf-8")
    write_run_manifest(report_dir, "eval", cfg.config_hash(), cfg.seed, profile=cfg.profile, split=split)
    print(summary, end="")


def ensemble_tune(
    a: str = "teacher",
    b: str = "student",
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    k: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    index_dir: str | None = None,
    report_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Tune the convex weights of a two-retriever ensemble on the dev split and report the accuracy of every grid point.

    :param a: The first retriever, ``teacher`` by default.
    :param b: The second retriever, ``student`` by default.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        k=k,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        index_dir=index_dir,
        report_dir=report_dir,
        processes=processes,
    )
    corpus = _load_corpus(cfg)
    dev = corpus.split("dev")
    table_a = _tables(cfg, corpus, a, ("dev",))["dev"]
    table_b = _tables(cfg, corpus, b, ("dev",))["dev"]
    weights, grid = tune_ensemble_weights(corpus.gold(dev), table_a, table_b, cfg.k)

    report_dir = Path(cfg.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    name = f"ensemble.{a}+{b}"
    write_jsonl(
        report_dir / f"{name}.jsonl",
        [{"w_a": w_a, "w_b": round(1.0 - w_a, 2), f"top_{cfg.k}": acc} for w_a, acc in sorted(grid.items())],
    )
    text = f"{a} + {b}: w_a={weights.w_a:.2f} w_b={weights.w_b:.2f} dev top-{cfg.k} {grid[weights.w_a]:.4f}\n"
    (report_dir / f"{name}.txt").write_text(text, encoding="utf-8")
    write_run_manifest(report_dir, "ensemble-tune", cfg.config_hash(), cfg.seed, profile=cfg.profile, a=a, b=b)
    print(text, end="")


def wer_report(
    split: str = "test",
    profile: str | None = None,
    config: str | None = None,
    set: str | None = None,
    seed: int | None = None,
    k: int | None = None,
    corpus_dir: str | None = None,
    checkpoint_dir: str | None = None,
    index_dir: str | None = None,
    report_dir: str | None = None,
    processes: int | None = None,
    log_level: str = "WARNING",
) -> None:
    """
    Top-k accuracy of every trained retriever per bucket of question transcript WER, with the rank correlation
    between WER and accuracy.
    """
    cfg = _setup(
        log_level,
        profile,
        config,
        set,
        seed=seed,
        k=k,
        corpus_dir=corpus_dir,
        checkpoint_dir=checkpoint_dir,
        index_dir=index_dir,
        report_dir=report_dir,
        processes=processes,
    )
    corpus = _load_corpus(cfg)
    names = _available_retrievers(cfg)
    if not names:
        raise PathError(f"No trained retriever in {cfg.checkpoint_dir}")
    questions = corpus.split(split)
    gold = corpus.gold(questions)
    hits = {}
    for name in names:
        table = _tables(cfg, corpus, name, (split,))[split]
        hits[name] = dict(zip(table.question_ids, table.hits(gold, cfg.k).tolist()))
    wers = {q.id: corpus.question_wer(q.id) for q in questions}
    report = wer_bucket_report([q.id for q in questions], wers, hits)
    report.write(cfg.report_dir, f"wer_report.{split}")
    write_run_manifest(cfg.report_dir, "wer-report", cfg.config_hash(), cfg.seed, profile=cfg.profile, split=split)
    print(report.to_text(), end="")
    for name in report.retrievers:
        print(f"{name}: rank correlation of WER and top-{cfg.k} accuracy {report.trend(name):.3f}")


COMMANDS = {
    "gen-corpus": gen_corpus,
    "train-teacher": train_teacher_command,
    "train-student": train_student_command,
    "train-cascading-student": train_cascading_student_command,
    "index": index,
    "search": search,
    "eval": evaluate,
    "ensemble-tune": ensemble_tune,
    "wer-report": wer_report,
}


def main() -> None:
    try:
        fire.Fire(COMMANDS)
    except SpeechDprError as e:
        logging.getLogger(__name__).debug("Command failed", exc_info=True)
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        for note in getattr(e, "__notes__", []):
            print(f"  {note}", file=sys.stderr)
        sys.exit(e.exit_code)


if __name__ == "__main__":
    main()
