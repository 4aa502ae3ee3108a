"""Command-line entry point: ``topogan <subcommand> [--config FILE] [--seed N] ...``.

Subcommands:
    corpus             generate the phantom corpus (PNG + manifest.csv)
    train-gan          train GAN(s) on a corpus and save the weight containers
    synthesize         draw labeled images from a saved GAN into a corpus directory
    train-classifier   train one classifier on a corpus (plus optional synthetic corpus)
    evaluate           score a saved classifier on a corpus
    run                execute the full cross-validated grid and write all reports
    quality            SSIM / PSNR / MSE / FID of a saved GAN against a corpus
    timing             average per-image inference time of saved classifiers

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .classifier import TopographyClassifier
from .experiment import (
    ConfigError,
    ExperimentConfig,
    build_corpus,
    classifier_name,
    emit,
    make_classifier,
    make_synthesizer,
    quality_study,
    run_experiment,
    timing_study,
    write_att_csv,
    write_quality_csv,
)
from .gan import CGANSynthesizer
from .metrics import confusion_matrix, macro_metrics
from .phantom import Dataset, load_corpus, save_corpus
from .seeding import derive_seed

logger = logging.getLogger("topogan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
FORMATS = ("csv", "json", "png")


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors map to the configuration exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _formats(value: str) -> tuple:
    items = tuple(v.strip() for v in value.split(",") if v.strip())
    bad = [v for v in items if v not in FORMATS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"formats must be a comma-separated subset of {','.join(FORMATS)}")
    return items


def _u64(value: str) -> int:
    seed = int(value)
    if not 0 <= seed < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return seed


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=_u64, help="master seed (overrides master_seed)")
    common.add_argument("--profile", choices=("desk", "full"), help="network size profile")
    common.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    common.add_argument("--formats", type=_formats, default=FORMATS, help="comma-separated subset of csv,json,png")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="topogan", description="Phantom corneal-topography GAN augmentation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("corpus", parents=[common], help="generate the phantom corpus")

    p = sub.add_parser("train-gan", parents=[common], help="train GAN(s) on a corpus")
    p.add_argument("--corpus", type=Path, help="corpus directory (default: generate from config)")

    p = sub.add_parser("synthesize", parents=[common], help="sample a saved GAN into a corpus directory")
    p.add_argument("--gan", type=Path, required=True, help="directory written by train-gan")
    p.add_argument("--n", type=int, help="images per class (default: synthetic_per_class)")

    p = sub.add_parser("train-classifier", parents=[common], help="train one classifier")
    p.add_argument("--corpus", type=Path, help="corpus directory (default: generate from config)")
    p.add_argument("--synthetic", type=Path, help="extra synthetic corpus appended to the training data")
    p.add_argument("--width", type=int, help="classifier base width (default: first of widths)")

    p = sub.add_parser("evaluate", parents=[common], help="score a saved classifier")
    p.add_argument("--model", type=Path, required=True, help="directory written by train-classifier")
    p.add_argument("--corpus", type=Path, required=True, help="corpus directory to score")

    sub.add_parser("run", parents=[common], help="run the full cross-validated grid")

    p = sub.add_parser("quality", parents=[common], help="image quality of a saved GAN")
    p.add_argument("--gan", type=Path, required=True, help="directory written by train-gan")
    p.add_argument("--corpus", type=Path, required=True, help="real corpus the GAN was trained on")

    p = sub.add_parser("timing", parents=[common], help="average inference time of saved classifiers")
    p.add_argument("--model", type=Path, action="append", required=True, help="classifier directory (repeatable)")
    p.add_argument("--corpus", type=Path, required=True, help="corpus supplying at least 100 images")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied."""
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if args.profile is not None:
        overrides["profile"] = args.profile
    if args.out is not None:
        overrides["output_dir"] = str(args.out)
    return config.replace(**overrides) if overrides else config


def _corpus(path: Optional[Path], config: ExperimentConfig) -> Dataset:
    return load_corpus(path) if path is not None else build_corpus(config)


def _write_json(data: dict, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------------
def cmd_corpus(args, config: ExperimentConfig, out: Path) -> None:
    manifest = save_corpus(build_corpus(config), out)
    print(manifest)


def cmd_train_gan(args, config, out) -> None:
    data = _corpus(args.corpus, config)
    gan = make_synthesizer(config, data.num_classes, derive_seed(config.master_seed, "cli/gan"))
    gan.fit(data.images, data.labels)
    print(gan.save(out))


def cmd_synthesize(args, config, out) -> None:
    gan = CGANSynthesizer.load(args.gan)
    n = args.n if args.n is not None else config.synthetic_per_class
    if n < 1:
        raise ConfigError(f"--n must be >= 1, got {n}")
    data = gan.sample_dataset(n, seed=derive_seed(config.master_seed, "cli/synthesize"))
    data.master_seed = config.master_seed
    print(save_corpus(data, out))


def cmd_train_classifier(args, config, out) -> None:
    data = _corpus(args.corpus, config)
    if args.synthetic is not None:
        data = Dataset.concat([data, load_corpus(args.synthetic)])
    width = args.width if args.width is not None else config.widths[0]
    model = make_classifier(config, data.num_classes, width, derive_seed(config.master_seed, f"cli/classifier/width={width}"))
    model.fit(data.images, data.labels)
    print(model.save(out))


def cmd_evaluate(args, config, out) -> None:
    model = TopographyClassifier.load(args.model)
    data = load_corpus(args.corpus)
    cm = confusion_matrix(model.predict(data.images), data.labels, model.num_classes)
    scores = macro_metrics(cm)._asdict()
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"n": len(data), "confusion": np.asarray(cm.counts).tolist(), **scores}, out / "evaluation.json")
    print(json.dumps(scores, sort_keys=True))


def cmd_run(args, config, out) -> None:
    report = run_experiment(config)
    for path in emit(report, out, args.formats):
        print(path)
    failed = [c for c in report.cells if c.status != "ok"]
    if failed:
        raise RuntimeError(f"{len(failed)} grid cell(s) failed; see report.csv")


def cmd_quality(args, config, out) -> None:
    gan = CGANSynthesizer.load(args.gan)
    real = load_corpus(args.corpus)
    embedder = make_classifier(config, real.num_classes, config.widths[0], derive_seed(config.master_seed, "quality/embedder"))
    embedder.fit(real.images, real.labels)
    result = quality_study(
        lambda n, c, s: gan.sample(n, c, random_state=s),
        real,
        embedder.transform,
        max(config.quality_samples, 1),
        derive_seed(config.master_seed, "quality/samples"),
        classes=[int(c) for c in gan.classes_],
    )
    out.mkdir(parents=True, exist_ok=True)
    if "csv" in args.formats:
        write_quality_csv(result, out / "quality.csv")
    row = {k: (v if np.isfinite(v) else str(v)) for k, v in result.row().items()}
    if "json" in args.formats:
        _write_json(row, out / "quality.json")
    print(json.dumps(row, sort_keys=True))


def cmd_timing(args, config, out) -> None:
    data = load_corpus(args.corpus)
    models = {}
    for i, path in enumerate(args.model):
        model = TopographyClassifier.load(path)
        models[f"{classifier_name(model.width)}#{i}:{path}"] = model.network_
    rows = timing_study(models, data.images[: max(config.timing_images, 100)], config.timing_repetitions)
    out.mkdir(parents=True, exist_ok=True)
    print(write_att_csv(rows, out / "att.csv"))


COMMANDS = {
    "corpus": cmd_corpus,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "train-classifier": cmd_train_classifier,
    "evaluate": cmd_evaluate,
    "run": cmd_run,
    "quality": cmd_quality,
    "timing": cmd_timing,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"topogan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(config.output_dir)
    try:
        COMMANDS[args.command](args, config, out)
    except ConfigError as exc:
        print(f"topogan: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # every other failure is a runtime failure for the caller
        print(f"topogan: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
