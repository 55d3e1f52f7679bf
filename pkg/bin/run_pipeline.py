#!/usr/bin/env python3
import argparse
import logging
import os
import warnings

from speechqa.dpr import cli

if __name__ == "__main__":
    parser = argparse.ArgumentParser(
        description="Run the full pipeline: generate a corpus, train teacher and students, index the archive, "
        "evaluate, tune the ensemble and write the WER report."
    )
    parser.add_argument(
        "--profile",
        type=str,
        help="The configuration profile. If it is not specified, the environment variable SPEECHDPR_PROFILE is used, "
        "then 'desk'.",
        required=False,
    )
    parser.add_argument(
        "--config",
        type=str,
        help="A config file in the profile format. If it is not specified, the environment variable SPEECHDPR_CONFIG "
        "is used if set.",
        required=False,
    )
    parser.add_argument("--seed", type=int, default=0, help="The run seed.")
    parser.add_argument(
        "--work_dir",
        "--work-dir",
        type=str,
        default="work",
        help="Directory receiving corpus, checkpoints, indexes and reports.",
    )
    parser.add_argument(
        "--set",
        type=str,
        help="Configuration overrides, e.g. 'teacher.epochs=2,corpus.num_passages=200'.",
        required=False,
    )
    parser.add_argument(
        "--cascading",
        action="store_true",
        help="Also train the cascading student and report its ensemble with the teacher.",
    )
    parser.add_argument(
        "--verbose",
        "-v",
        help="Print verbose output. Multiple -v options increase the verbosity.",
        action="count",
    )

    args = parser.parse_args()

    # Take the verbose argument and set the logging level accordingly
    match args.verbose:
        case None | 0:
            log_level = "ERROR"
        case 1:
            log_level = "WARNING"
        case 2:
            log_level = "INFO"
        case 3:
            log_level = "DEBUG"
        case _:
            warnings.warn("Verbose argument is too high. Setting logging level to DEBUG.")
            log_level = "DEBUG"
    logging.basicConfig(level=getattr(logging, log_level))

    common = dict(profile=args.profile, config=args.config, set=args.set, seed=args.seed, log_level=log_level)
    paths = dict(
        corpus_dir=os.path.join(args.work_dir, "corpus"),
        checkpoint_dir=os.path.join(args.work_dir, "checkpoints"),
    )
    index_dir = os.path.join(args.work_dir, "index")
    report_dir = os.path.join(args.work_dir, "reports")

    cli.gen_corpus(corpus_dir=paths["corpus_dir"], **common)
    logging.info("Corpus generated")
    cli.train_teacher_command(**paths, **common)
    cli.train_student_command(**paths, **common)
    if args.cascading:
        cli.train_cascading_student_command(**paths, **common)
    logging.info("Training finished")

    names = ["teacher", "student"] + (["cascading-student"] if args.cascading else [])
    for name in names:
        cli.index(name=name, index_dir=index_dir, **paths, **common)
    cli.evaluate(split="test", index_dir=index_dir, report_dir=report_dir, **paths, **common)
    cli.ensemble_tune(a="teacher", b="student", index_dir=index_dir, report_dir=report_dir, **paths, **common)
    cli.wer_report(split="test", index_dir=index_dir, report_dir=report_dir, **paths, **common)
    logging.info(f"Reports written to {report_dir}")
