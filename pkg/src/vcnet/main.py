"""
vcnet - dual-stream visual-cortex network
Main entry point: train, eval, gradcheck and inspect subcommands.
"""
import argparse
import logging
import sys
from pathlib import Path

if __package__ in (None, ""):
    # run as a script: make the package importable from src/
    sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from vcnet.app_core import VCNetCore, format_metric
from vcnet.config.settings_manager import RunConfig, SettingsManager
from vcnet.core.errors import VCNetError
from vcnet.core.gradcheck import failures
from vcnet.utils.logs import setup_logging

logger = logging.getLogger("vcnet.main")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset (choose one)")
    g.add_argument("--data-idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX image/label files")
    g.add_argument("--val-idx", nargs=2, metavar=("IMAGES", "LABELS"),
                   help="published validation split (default: seeded 90/10 split)")
    g.add_argument("--data-lf", metavar="DIR", help="light-field directory class/sample/view_r_c.pgm")
    g.add_argument("--grid", nargs=2, type=int, metavar=("U", "V"), help="light-field angular grid")
    g.add_argument("--data-synthetic", type=int, metavar="N_PER_CLASS", help="procedural 10-class textures")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--variant", choices=("full", "mini"))
    p.add_argument("--seed", type=int)
    p.add_argument("--settings", type=Path, help="YAML settings overlay")
    p.add_argument("--no-feedback", action="store_true", help="drop the AIT -> V1 feedback edge")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcnet", description="Dual-stream visual-cortex network")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write metrics, checkpoint and manifest")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="prediction-penalty weight")
    p.add_argument("--out", type=Path, help="run directory (default runs/latest)")
    p.add_argument("--checkpoint", type=Path, help="checkpoint path (default OUT/checkpoint.vcn)")
    p.add_argument("--workers", type=int, help="data-parallel worker threads")
    p.add_argument("--no-wall-clock", action="store_true", help="write wall_seconds as 0")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the validation split")
    _add_data_flags(p)
    _add_model_flags(p)
    p.add_argument("--out", type=Path)
    p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    _add_model_flags(p)

    p = sub.add_parser("inspect", help="print graph order, widths and parameter counts")
    _add_data_flags(p)
    _add_model_flags(p)
    return parser


def cmd_train(config: RunConfig, core: VCNetCore) -> int:
    summary = core.train(config)
    print(f"metrics={summary.metrics_path}")
    print(f"checkpoint={summary.checkpoint_path}")
    print(f"manifest={summary.manifest_path}")
    print(f"final_val_acc={format_metric(summary.final.accuracy)}")
    return 0


def cmd_eval(config: RunConfig, core: VCNetCore) -> int:
    result = core.evaluate(config)
    print(f"accuracy={format_metric(result.accuracy)}")
    print(f"loss={format_metric(result.loss)}")
    return 0


def cmd_gradcheck(config: RunConfig, core: VCNetCore) -> int:
    reports = core.gradcheck(config)
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<24} {r.max_rel_error:.3e} {status} ({r.checked} checked, {r.skipped} skipped)")
    bad = failures(reports)
    for r in bad:
        print(f"exceeded {r.tolerance:g}: {r.name} at {r.worst_parameter or '<no coordinate checked>'}")
    return 1 if bad else 0


def cmd_inspect(config: RunConfig, core: VCNetCore) -> int:
    report = core.inspect(config)
    print(f"variant: {report.variant}")
    print("execution order: " + " -> ".join(report.order))
    print("widths:")
    for area in report.order:
        print(f"  {area:<16} {report.widths[area]}")
    print("parameters per block:")
    for block, count in report.block_counts.items():
        print(f"  {block:<28} {count}")
    print(f"total parameters: {report.total}")
    print(f"serialized size: {report.serialized_bytes} bytes ({report.serialized_bytes / 1e6:.4f} MB)")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv=None) -> int:
    """Parse ``argv``, run one subcommand and return its exit status.

    A VCNetError or missing file is logged and mapped to 1; argparse usage
    errors exit with 2.
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        settings = SettingsManager(args.settings)
        config = RunConfig.from_args(args, settings)
        return COMMANDS[args.command](config, VCNetCore(settings))
    except VCNetError as e:
        logger.error("%s", e)
        return 1
    except FileNotFoundError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
