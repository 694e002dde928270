"""
Command-line entry point: dataset generation, training, evaluation, ablations and reports.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from .config import Settings, parse_value
from .exceptions import CondFuseError, ConfigurationError
from .fusion import FusionKind
from .harness import (ABLATION_AXES, build_grid, build_model, condition_probe, count_parameters, evaluate_miou,
                      report_caa_weights, run_ablation, run_gradcheck_suite, train)
from .scenes import SceneDataset, generate_dataset

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.cfw"
SETTINGS_NAME = "settings.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condfuse", description="Condition-aware multimodal fusion for segmentation")
    parser.add_argument("--config", type=Path, help="key = value configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration value (repeatable)")
    parser.add_argument("--log-level", help="logging level (default from settings)")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="render the synthetic benchmark")
    gen.add_argument("--out", type=Path, help="output directory (default data_dir)")
    gen.add_argument("--train", type=int, help="training scenes")
    gen.add_argument("--val", type=int, help="validation scenes")
    gen.add_argument("--test", type=int, help="test scenes")
    gen.add_argument("--seed", type=int, help="generator seed")
    gen.add_argument("--size", type=int, help="scene size in pixels")
    gen.add_argument("--workers", type=int, help="rendering processes")

    run = commands.add_parser("train", help="train one model and evaluate it")
    run.add_argument("--out", type=Path, help="run directory (default output_dir)")

    ev = commands.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", type=Path, required=True, help="run directory or checkpoint file")
    ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    ev.add_argument("--no-probe", action="store_true", help="skip the condition probe")

    ab = commands.add_parser("ablate", help="run ablation axes over several seeds")
    ab.add_argument("--axes", nargs="+", default=["fusion"], choices=sorted(ABLATION_AXES))
    ab.add_argument("--grid", action="append", default=[], metavar="KEY=JSON_LIST",
                    help="custom grid dimension, e.g. train.lambda_cond=[0,0.5,1]")
    ab.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ab.add_argument("--workers", type=int, default=1)
    ab.add_argument("--out", type=Path, help="report directory (default output_dir)")

    rw = commands.add_parser("report-weights", help="per-condition CAA weights as CSV and SVG")
    rw.add_argument("--checkpoint", type=Path, required=True, help="run directory or checkpoint file")
    rw.add_argument("--split", default="test", choices=["train", "val", "test"])
    rw.add_argument("--out", type=Path, help="report directory (default next to the checkpoint)")

    gc = commands.add_parser("check-grad", help="compare analytic and finite-difference gradients")
    gc.add_argument("--only", nargs="+", help="case names to run")
    gc.add_argument("--tolerance", type=float, default=1e-4)

    commands.add_parser("params", help="parameter counts against the one-backbone-per-modality variant")
    return parser


def _checkpoint_paths(path: Path) -> Tuple[Path, Path]:
    if path.is_dir():
        return path / CHECKPOINT_NAME, path / SETTINGS_NAME
    return path, path.with_name(SETTINGS_NAME)


def load_run(path: Path, settings: Settings):
    """Rebuild a trained model from a run directory (or a checkpoint beside its settings.json)."""
    checkpoint, settings_file = _checkpoint_paths(path)
    if settings_file.exists():
        stored = Settings.model_validate_json(settings_file.read_text(encoding="utf-8"))
        settings = settings.model_copy(update={"model": stored.model, "train": stored.train})
    else:
        logger.warning(f"No {SETTINGS_NAME} beside {checkpoint}; using the current model settings")
    model = build_model(settings.model, settings.train.seed)
    model.load(checkpoint)
    logger.info(f"Loaded {checkpoint}")
    return model, settings


def cmd_gen_data(args: argparse.Namespace, settings: Settings) -> int:
    data = settings.data
    manifests = generate_dataset(
        args.out or settings.data_dir,
        train=args.train if args.train is not None else data.train_size,
        val=args.val if args.val is not None else data.val_size,
        test=args.test if args.test is not None else data.test_size,
        seed=args.seed if args.seed is not None else data.seed,
        size=args.size if args.size is not None else data.image_size,
        workers=args.workers if args.workers is not None else data.workers,
    )
    for name, manifest in manifests.items():
        print(f"{name}: {manifest.count} scenes of {manifest.height}x{manifest.width}")
    return 0


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    dataset = SceneDataset.load(settings.data_dir)
    run_dir = Path(args.out or settings.output_dir)
    model, report = train(settings, dataset, run_dir)
    model.save(run_dir / CHECKPOINT_NAME)
    (run_dir / SETTINGS_NAME).write_text(settings.model_dump_json(indent=2), encoding="utf-8")
    (run_dir / "report.json").write_text(report.model_dump_json(indent=2), encoding="utf-8")
    print(f"val mIoU {report.split_miou['val']:.4f}  test mIoU {report.split_miou['test']:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    model, settings = load_run(args.checkpoint, settings)
    dataset = SceneDataset.load(settings.data_dir)
    result = evaluate_miou(model, dataset.split(args.split), settings.train.modalities, settings.train.eval_batch_size)
    print(f"{args.split} mIoU {result.miou:.4f}")
    for cell, value in result.cell_miou.items():
        print(f"  {cell:<12} {value:.4f}")
    if model.uses_condition_token and not args.no_probe:
        probe = condition_probe(model, dataset.train, dataset.split(args.split))
        print(f"condition probe accuracy {probe.test_accuracy:.4f}")
    return 0


def _parse_grid(lines: Sequence[str]) -> dict:
    grid = {}
    for line in lines:
        if "=" not in line:
            raise ConfigurationError(f"--grid expects KEY=JSON_LIST, got {line!r}")
        key, raw = line.split("=", 1)
        values = parse_value(raw)
        if not isinstance(values, list) or not values:
            raise ConfigurationError(f"--grid {key} needs a non-empty JSON list")
        grid[key.strip()] = values
    return grid


def cmd_ablate(args: argparse.Namespace, settings: Settings) -> int:
    dataset = SceneDataset.load(settings.data_dir)
    jobs = build_grid(args.axes, args.seeds, _parse_grid(args.grid))
    logger.info(f"Running {len(jobs)} ablation jobs")
    rows = run_ablation(settings, dataset, jobs, workers=args.workers, out_dir=args.out or settings.output_dir)
    failed = [r for r in rows if r.error]
    print(f"{len(rows) - len(failed)} runs finished, {len(failed)} failed")
    return 0


def cmd_report_weights(args: argparse.Namespace, settings: Settings) -> int:
    model, settings = load_run(args.checkpoint, settings)
    if settings.model.fusion_kind != FusionKind.CAA:
        raise ConfigurationError(f"report-weights needs a caa model, got {settings.model.fusion_kind.value}")
    dataset = SceneDataset.load(settings.data_dir)
    checkpoint, _ = _checkpoint_paths(args.checkpoint)
    table = report_caa_weights(model, dataset.split(args.split), args.out or checkpoint.parent,
                               settings.train.modalities)
    for cell, row in table.items():
        print(f"{cell:<12} " + " ".join(f"{v:6.2f}" for v in row))
    return 0


def cmd_check_grad(args: argparse.Namespace, settings: Settings) -> int:
    results = run_gradcheck_suite(args.only, tolerance=args.tolerance)
    for result in results:
        status = "ok" if result.passed else "FAIL"
        print(f"{result.name:<20} {result.max_relative_error:.3e}  {status}")
    return 0 if all(r.passed for r in results) else 1


def cmd_params(args: argparse.Namespace, settings: Settings) -> int:
    counts = count_parameters(build_model(settings.model, settings.train.seed))
    print(json.dumps(counts.by_group, indent=2))
    print(f"total {counts.total}")
    print(f"backbone+fusion {counts.fusion_path} vs {counts.reference_fusion_path} "
          f"({100.0 * counts.reduction_ratio:.1f}%)")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report-weights": cmd_report_weights,
    "check-grad": cmd_check_grad,
    "params": cmd_params,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the condfuse command."""
    args = build_parser().parse_args(argv)
    try:
        settings = Settings.load(args.config, args.overrides)
        level = (args.log_level or settings.log_level).upper()
        logging.basicConfig(level=level, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s")
        logging.getLogger().setLevel(level)
        return COMMANDS[args.command](args, settings)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e.message}")
        return 1
    except CondFuseError as e:
        logger.error(f"{type(e).__name__}: {e.message}")
        return 1
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 1
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
