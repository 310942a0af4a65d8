"""
Central controller/mediator for vcnet.
Coordinates settings, data loading, model construction, training and
artifact writing for the CLI commands.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config.settings_manager import RunConfig, SettingsManager, read_app_metadata
from .core import gradcheck
from .core.checkpoint import restore_checkpoint, save_checkpoint
from .core.data_io import (generate_synthetic, lightfield_class_names, load_idx, load_lightfield,
                           split_dataset)
from .core.errors import ConfigError
from .core.graph import (StreamGraph, block_parameter_counts, build_model, execution_order,
                         parameter_count, serialized_size_bytes)
from .core.trainer import METRICS_HEADER, EpochRecord, EvalResult, evaluate, fit

logger = logging.getLogger(__name__)


def format_metric(value: float) -> str:
    return f"{value:.8f}"


@dataclass
class Dataset:
    train: Sequence
    val: Sequence
    input_shape: Tuple[int, int, int]
    num_classes: int
    description: str


@dataclass
class TrainSummary:
    graph: StreamGraph
    history: List[EpochRecord]
    final: EvalResult
    metrics_path: Path
    checkpoint_path: Path
    manifest_path: Path


@dataclass
class InspectReport:
    variant: str
    order: List[str]
    widths: Dict[str, int]
    block_counts: Dict[str, int]
    total: int
    serialized_bytes: int


class VCNetCore:
    """Central controller coordinating all vcnet components."""

    def __init__(self, settings_manager: Optional[SettingsManager] = None):
        self.settings_manager = settings_manager or SettingsManager()
        self.metadata = read_app_metadata()

    # ---------------------------------------------------------
    # Data
    # ---------------------------------------------------------
    def load_data(self, config: RunConfig) -> Dataset:
        """Train/validation splits for the configured source."""
        source = config.source
        if source is None:
            raise ConfigError("no dataset source configured")
        fraction = config.settings['validation_fraction']
        if source.kind == "idx":
            samples = load_idx(source.images, source.labels)
            if source.val_images is not None:
                train, val = samples, load_idx(source.val_images, source.val_labels)
            else:
                train, val = split_dataset(samples, fraction, config.seed)
            num_classes = max(s.label for s in list(train) + list(val)) + 1
            description = f"idx:{source.images}"
        elif source.kind == "lightfield":
            samples = load_lightfield(source.directory, *source.grid)
            train, val = split_dataset(samples, fraction, config.seed)
            num_classes = len(lightfield_class_names(source.directory))
            description = f"lightfield:{source.directory}:{source.grid[0]}x{source.grid[1]}"
        else:
            spec = config.synthetic_spec()
            train, val = generate_synthetic(spec)
            num_classes = spec.num_classes
            description = f"synthetic:{source.per_class}"
        input_shape = tuple(train[0].pixels.shape)
        logger.info("dataset %s: %d train / %d validation samples, %d classes, input %s",
                    description, len(train), len(val), num_classes, "x".join(map(str, input_shape)))
        return Dataset(train, val, input_shape, num_classes, description)

    def build(self, config: RunConfig, data: Dataset) -> StreamGraph:
        c, h, w = data.input_shape
        model_config = config.model_config(input_channels=c, height=h, width=w,
                                           num_classes=data.num_classes)
        return build_model(model_config, seed=config.seed)

    # ---------------------------------------------------------
    # Commands
    # ---------------------------------------------------------
    def train(self, config: RunConfig) -> TrainSummary:
        data = self.load_data(config)
        graph = self.build(config, data)
        out = config.out_dir
        out.mkdir(parents=True, exist_ok=True)
        self.settings_manager.save_settings(out / "settings.yaml")
        metrics_path = out / "metrics.csv"

        with open(metrics_path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)

            def on_epoch(record: EpochRecord):
                writer.writerow(record.as_row())
                f.flush()
            result = fit(graph, data.train, data.val, config.train_config(), config.seed, on_epoch)

        checkpoint_path = save_checkpoint(result.graph.parameters, config.checkpoint_path)
        # report what the checkpoint reproduces, not the float64 in-memory model
        restored = restore_checkpoint(graph, checkpoint_path)
        final = evaluate(restored, data.val, config.settings['eval_batch_size'])
        logger.info("final val_acc=%s val_loss=%s", format_metric(final.accuracy), format_metric(final.loss))

        manifest_path = self.write_manifest(config, data, result.graph, result.history, final, checkpoint_path)
        return TrainSummary(result.graph, result.history, final, metrics_path, checkpoint_path, manifest_path)

    def evaluate(self, config: RunConfig) -> EvalResult:
        data = self.load_data(config)
        graph = restore_checkpoint(self.build(config, data), config.checkpoint_path)
        result = evaluate(graph, data.val, config.settings['eval_batch_size'])
        logger.info("accuracy=%s loss=%s", format_metric(result.accuracy), format_metric(result.loss))
        return result

    def gradcheck(self, config: RunConfig) -> List[gradcheck.GradCheckReport]:
        return gradcheck.run_suite(seed=config.seed)

    def inspect(self, config: RunConfig) -> InspectReport:
        channels = config.source.channels if config.source is not None else 1
        graph = build_model(config.model_config(input_channels=channels), seed=config.seed)
        return InspectReport(variant=config.variant, order=execution_order(graph),
                             widths={n: node.channels for n, node in graph.nodes.items()},
                             block_counts=block_parameter_counts(graph), total=parameter_count(graph),
                             serialized_bytes=serialized_size_bytes(graph))

    # ---------------------------------------------------------
    # Artifacts
    # ---------------------------------------------------------
    def write_manifest(self, config: RunConfig, data: Dataset, graph: StreamGraph,
                       history: List[EpochRecord], final: EvalResult, checkpoint_path: Path) -> Path:
        """Flat key=value run manifest: config echo, sizes, final metrics."""
        entries = [
            ("name", self.metadata['name']),
            ("version", self.metadata['version']),
            ("command", config.command),
            ("data", data.description),
            ("variant", config.variant),
            ("seed", config.seed),
            ("epochs", config.epochs),
            ("lambda", config.lam),
            ("feedback", str(config.settings['feedback']).lower()),
            ("input_shape", "x".join(map(str, data.input_shape))),
            ("num_classes", data.num_classes),
            ("train_samples", len(data.train)),
            ("val_samples", len(data.val)),
            ("parameter_count", parameter_count(graph)),
            ("checkpoint", checkpoint_path),
            ("checkpoint_bytes", checkpoint_path.stat().st_size),
        ]
        if history:
            last = history[-1]
            entries += [("final_train_loss", format_metric(last.train_loss)),
                        ("final_train_ce", format_metric(last.train_ce)),
                        ("final_train_pred_penalty", format_metric(last.train_pred_penalty)),
                        ("final_train_acc", format_metric(last.train_acc))]
        entries += [("final_val_acc", format_metric(final.accuracy)),
                    ("final_val_loss", format_metric(final.loss))]
        path = config.out_dir / "manifest.txt"
        path.write_text("".join(f"{key}={value}\n" for key, value in entries))
        return path


def read_manifest(path) -> Dict[str, str]:
    manifest = {}
    for line in Path(path).read_text().splitlines():
        if line and "=" in line:
            key, value = line.split("=", 1)
            manifest[key] = value
    return manifest
