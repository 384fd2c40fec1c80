"""``histoseg`` command line: synth, patch, train, predict, eval, gradcheck, flops."""

import argparse
import logging
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Final, List, Optional, Sequence, Tuple

import numpy as np

from histoseg import data, metrics
from histoseg.checkpoint import load_checkpoint
from histoseg.config import RunConfig
from histoseg.errors import ConfigError, DatasetError, HistoSegError
from histoseg.flops import count_flops
from histoseg.gradcheck import run_suite
from histoseg.network import build
from histoseg.trainer import predict_image, train
from histoseg.util import jsonio
from histoseg.util.threads import max_workers

__all__ = ("main", "make_parser")

logger = logging.getLogger(__name__)

LOG_FORMAT: Final = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RESOLVED_CONFIG: Final = "resolved-config.json"
LOG_LEVELS: Final = ("DEBUG", "INFO", "WARNING", "ERROR")

Command = Callable[[argparse.Namespace], int]


def cmd_synth(args: argparse.Namespace) -> int:
    """Write a synthetic dataset with its split manifest."""
    samples = data.generate_synthetic(args.n, args.size, args.seed)
    manifest = data.split(samples, args.fractions, args.seed)
    data.save_dataset(args.out, samples, manifest)
    logger.info(
        "Split %d/%d/%d",
        len(manifest.train),
        len(manifest.val),
        len(manifest.test),
    )
    return 0


def _pair_paths(
    first: Path, second: Path, what: str
) -> List[Tuple[Path, Path]]:
    paths = sorted(first.glob("*.png"))
    if not paths:
        msg = f"No images found under {first}"
        raise DatasetError(msg)

    pairs = []
    for path in paths:
        other = second / path.name
        if not other.is_file():
            msg = f"No {what} for image {path.stem!r} (expected {other})"
            raise DatasetError(msg)
        pairs.append((path, other))

    return pairs


def cmd_patch(args: argparse.Namespace) -> int:
    """Cut every image/mask pair into fixed-size patches."""
    pairs = _pair_paths(Path(args.images), Path(args.masks), "mask")

    def cut(pair: Tuple[Path, Path]) -> List[data.LabeledSample]:
        image_path, mask_path = pair
        return data.extract_patches(
            data.load_image(image_path),
            data.load_mask(mask_path),
            args.size,
            args.stride,
            source=image_path.stem,
        )

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        patches = [s for chunk in pool.map(cut, pairs) for s in chunk]

    data.save_dataset(args.out, patches)
    counts = Counter(sample.source for sample in patches)
    jsonio.dump(
        Path(args.out) / "summary.json",
        {
            "size": args.size,
            "stride": args.stride,
            "total": len(patches),
            "sources": dict(sorted(counts.items())),
        },
    )
    logger.info("Cut %d patches from %d images", len(patches), len(pairs))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    """Train a model on a dataset directory."""
    overrides = list(args.set)
    if args.epochs is not None:
        overrides.append(f"train.epochs={args.epochs}")
    run = RunConfig.load(args.config, overrides)

    root = args.data or run.data.root
    if root is None:
        msg = "No dataset given: pass --data or set data.root"
        raise ConfigError(msg)

    samples, manifest = data.load_dataset(root)
    if run.data.resize is not None:
        size = run.data.resize
        samples = [data.resize_sample(s, size) for s in samples]
    if manifest is None:
        manifest = data.split(samples, run.data.fractions, run.data.split_seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / RESOLVED_CONFIG)

    result = train(
        manifest.select(samples, "train"),
        manifest.select(samples, "val"),
        run.network,
        run.train,
        out_dir=out,
    )
    logger.info("Best validation IoU at epoch %d", result.best_epoch)
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    """Segment one full-size image with a trained checkpoint."""
    model = Path(args.model)
    config = args.config
    if config is None and (model.parent / RESOLVED_CONFIG).is_file():
        config = model.parent / RESOLVED_CONFIG

    run = RunConfig.load(config)
    graph, store = build(run.network, run.train.seed)
    load_checkpoint(model, store)

    probabilities = predict_image(graph, data.load_image(args.image))
    if args.prob:
        output = np.round(np.clip(probabilities, 0, 1) * 255).astype(np.uint8)
    else:
        output = metrics.binarize(probabilities, args.threshold)

    data.save_image(args.out, output)
    logger.info("Wrote %s", args.out)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    """Score predicted masks against ground-truth masks."""
    pairs = _pair_paths(Path(args.pred), Path(args.gt), "ground truth")

    def score(pair: Tuple[Path, Path]) -> metrics.ImageRecord:
        pred_path, gt_path = pair
        return metrics.evaluate_pair(
            data.load_mask(pred_path),
            data.load_mask(gt_path),
            name=pred_path.stem,
            threshold=args.threshold,
            matching=args.matching,
        )

    with ThreadPoolExecutor(max_workers=max_workers()) as pool:
        records = list(pool.map(score, pairs))

    report = metrics.EvalReport.from_records(records)
    jsonio.dump(args.report, report.to_dict())
    for name, value in report.aggregate.items():
        logger.info("%s: %s", name, value)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    """Finite-difference check of every operation; 1 on any failure."""
    results = run_suite(args.seed, network=not args.skip_network)
    for result in results:
        status = "ok" if result.passed else "FAILED"
        sys.stdout.write(
            f"{result.name:<40} {status:<7} {result.error:.2e} "
            f"(tolerance {result.tolerance:.0e})\n"
        )

    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("Gradient check failed for %s", ", ".join(failed))
        return 1

    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    """Print the per-layer multiply-add table."""
    run = RunConfig.load(args.config, args.set)
    size = (args.size[0], args.size[1]) if args.size else None
    report = count_flops(run.network, size)
    sys.stdout.write(report.format_table() + "\n")
    sys.stdout.write(f"parameters: {report.total_params:,}\n")
    return 0


def _fractions(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError:
        msg = f"expected comma-separated numbers, got {text!r}"
        raise argparse.ArgumentTypeError(msg) from None


def make_parser() -> argparse.ArgumentParser:
    """Argument parser for every subcommand."""
    parser = argparse.ArgumentParser(
        prog="histoseg", description="Nuclei segmentation toolkit."
    )
    parser.add_argument(
        "--log-level", default="INFO", choices=LOG_LEVELS, type=str.upper
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--out", required=True)
    synth.add_argument("--n", type=int, default=200)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--seed", type=int, default=42)
    synth.add_argument(
        "--fractions", type=_fractions, default=data.DEFAULT_FRACTIONS
    )
    synth.set_defaults(handler=cmd_synth)

    patch = commands.add_parser("patch", help="cut images into patches")
    patch.add_argument("--images", required=True)
    patch.add_argument("--masks", required=True)
    patch.add_argument("--out", required=True)
    patch.add_argument("--size", type=int, default=data.DEFAULT_PATCH)
    patch.add_argument("--stride", type=int, default=data.DEFAULT_PATCH)
    patch.set_defaults(handler=cmd_patch)

    trainer = commands.add_parser("train", help="train a model")
    trainer.add_argument("--data")
    trainer.add_argument("--config")
    trainer.add_argument("--out", required=True)
    trainer.add_argument("--epochs", type=int)
    trainer.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE"
    )
    trainer.set_defaults(handler=cmd_train)

    predict = commands.add_parser("predict", help="segment one image")
    predict.add_argument("--model", required=True)
    predict.add_argument("--image", required=True)
    predict.add_argument("--out", required=True)
    predict.add_argument("--config")
    predict.add_argument("--prob", action="store_true")
    predict.add_argument("--threshold", type=float, default=0.5)
    predict.set_defaults(handler=cmd_predict)

    evaluate = commands.add_parser("eval", help="score predicted masks")
    evaluate.add_argument("--pred", required=True)
    evaluate.add_argument("--gt", required=True)
    evaluate.add_argument("--report", required=True)
    evaluate.add_argument("--threshold", type=float, default=0.5)
    evaluate.add_argument(
        "--matching", choices=("greedy", "optimal"), default="greedy"
    )
    evaluate.set_defaults(handler=cmd_eval)

    gradcheck = commands.add_parser("gradcheck", help="check gradients")
    gradcheck.add_argument("--seed", type=int, default=0)
    gradcheck.add_argument("--skip-network", action="store_true")
    gradcheck.set_defaults(handler=cmd_gradcheck)

    flops = commands.add_parser("flops", help="per-layer cost table")
    flops.add_argument("--config")
    flops.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    flops.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE"
    )
    flops.set_defaults(handler=cmd_flops)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand and return its exit status."""
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    handler: Command = args.handler
    try:
        return handler(args)
    except (HistoSegError, OSError) as e:
        logger.error("%s: %s", args.command, e)  # noqa: TRY400
        return 1

