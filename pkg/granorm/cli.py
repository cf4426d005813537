"""Command line interface for granorm."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Any, Dict, List, NoReturn

from . import pipeline
from .artifacts import Workspace
from .config import load_run_config, log_level
from .data import convert_cifar10, convert_svhn, write_idx_dataset
from .errors import EXIT_OK, EXIT_USAGE, GranormError, UsageError
from .schema import CAUSES, DETECTORS
from .version import __version__

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with status 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {
        "dataset": args.dataset,
        "seed": args.seed,
        "output_dir": args.out,
        "gran.sigma": args.sigma,
        "architecture": args.model,
    }
    if args.epsilon is not None:
        overrides["attacks.fgsm.epsilon"] = args.epsilon
        for kind in ("bim_a", "bim_b"):
            overrides[f"attacks.{kind}.epsilon"] = args.epsilon
            overrides[f"attacks.{kind}.alpha"] = args.epsilon / 10.0
    return overrides


def _config(args: argparse.Namespace) -> Dict[str, Any]:
    config = getattr(args, "run_config", None)
    if config is None:
        config = load_run_config(args.config, _overrides(args))
    return config


def _split(values: List[str] | None) -> List[str] | None:
    if not values:
        return None
    return [item for value in values for item in value.split(",") if item]


def handle_train(args: argparse.Namespace) -> int:
    result = pipeline.train_stage(_config(args))
    print(f"train accuracy {result.train_accuracy:.4f}, test accuracy {result.test_accuracy:.4f}")
    return EXIT_OK


def handle_attack(args: argparse.Namespace) -> int:
    results = pipeline.attack_stage(_config(args), _split(args.setup))
    for kind, result in results.items():
        print(f"{kind}: success rate {100 * result.success_rate:.2f}% of {len(result.success)}")
    return EXIT_OK


def handle_build_setups(args: argparse.Namespace) -> int:
    setups = pipeline.build_setups_stage(_config(args), _split(args.setup))
    for cause, setup in setups.items():
        print(f"{cause}: {len(setup)} samples {setup.counts()}")
    return EXIT_OK


def handle_extract(args: argparse.Namespace) -> int:
    features = pipeline.extract_stage(_config(args), _detectors(args), _split(args.setup))
    for (detector, cause), feature_set in features.items():
        print(f"{detector}/{cause}: {feature_set.values.shape[0]} x {feature_set.feature_length}")
    return EXIT_OK


def handle_fit_detector(args: argparse.Namespace) -> int:
    heads = pipeline.fit_stage(_config(args), _detectors(args), _split(args.setup))
    for (detector, cause), head in heads.items():
        print(f"{detector}/{cause}: {head.parameter_count} parameters")
    return EXIT_OK


def handle_evaluate(args: argparse.Namespace) -> int:
    report = pipeline.evaluate_stage(_config(args), _detectors(args), _split(args.setup))
    print(report.to_table(), end="")
    return EXIT_OK


def handle_report(args: argparse.Namespace) -> int:
    report = pipeline.report_stage(_config(args))
    print(report.to_csv() if args.csv else report.to_table(), end="")
    return EXIT_OK


def handle_pipeline(args: argparse.Namespace) -> int:
    report = pipeline.run_pipeline(_config(args), _detectors(args))
    print(report.to_table(), end="")
    return EXIT_OK


def handle_convert(args: argparse.Namespace) -> int:
    if args.format == "cifar10":
        images, labels = convert_cifar10(args.inputs)
    else:
        if len(args.inputs) != 1:
            raise UsageError("svhn conversion takes exactly one .mat file")
        images, labels = convert_svhn(args.inputs[0])
    images_path, labels_path = write_idx_dataset(images, labels, args.images, args.labels)
    print(f"wrote {len(images)} images to {images_path} and labels to {labels_path}")
    return EXIT_OK


def _detectors(args: argparse.Namespace) -> List[str] | None:
    return [args.detector] if args.detector else None


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration file")
    parser.add_argument("--seed", type=int, help="Root seed; every stage derives its own from it")
    parser.add_argument("--out", help="Output directory (default runs/<dataset>)")
    parser.add_argument("--dataset", choices=("mnist", "svhn", "cifar10", "synthetic"), help="Dataset to use")
    parser.add_argument("--model", help="Architecture: built-in name or JSON file")
    parser.add_argument("--sigma", type=float, help="Gaussian smoothing standard deviation for GraN")
    parser.add_argument("--epsilon", type=float, help="FGSM/BIM perturbation bound (BIM step is epsilon/10)")
    parser.add_argument(
        "--setup",
        action="append",
        metavar="CAUSE",
        help=f"Restrict to set-ups ({', '.join(CAUSES)}); repeat or comma-separate",
    )
    parser.add_argument("--detector", choices=DETECTORS, help="Restrict to one detector")
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")


def create_parser() -> argparse.ArgumentParser:
    parser = ArgumentParser(prog="granorm", description="Gradient-norm misclassification detection pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    commands.required = True

    stages = {
        "train": (handle_train, "Train the classifier and write the checkpoint"),
        "attack": (handle_attack, "Run the adversarial attacks on correctly classified pre-test images"),
        "build-setups": (handle_build_setups, "Build the balanced detection set-ups"),
        "extract": (handle_extract, "Extract GraN and LID features for every set-up"),
        "fit-detector": (handle_fit_detector, "Fit the logistic-regression heads"),
        "evaluate": (handle_evaluate, "Score the test partitions and write the reports"),
        "report": (handle_report, "Re-render the reports from evaluation.json"),
        "pipeline": (handle_pipeline, "Run every stage in order"),
    }
    for name, (handler, help_text) in stages.items():
        sub = commands.add_parser(name, help=help_text)
        _add_run_options(sub)
        if name == "report":
            sub.add_argument("--csv", action="store_true", help="Print the CSV report instead of the table")
        sub.set_defaults(handler=handler, locked=True)

    convert = commands.add_parser("convert", help="Convert CIFAR-10 or SVHN downloads into IDX files")
    convert.add_argument("format", choices=("cifar10", "svhn"))
    convert.add_argument("inputs", nargs="+", help="CIFAR-10 pickle batches or one SVHN .mat file")
    convert.add_argument("--images", required=True, help="Destination IDX images file")
    convert.add_argument("--labels", help="Destination IDX labels file (derived from --images by default)")
    convert.add_argument("--debug", action="store_true", help="Enable debug logging")
    convert.set_defaults(handler=handle_convert, locked=False)
    return parser


def main(argv: List[str] | None = None) -> int:
    parser = create_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=log_level(args.debug), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        if not args.locked:
            return args.handler(args)
        config = _config(args)
        args.run_config = config
        with Workspace(config["output_dir"], config).lock():
            return args.handler(args)
    except GranormError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"granorm: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover - CLI entry
    raise SystemExit(main())
