"""
Run settings for vcnet.
Defaults live here; an optional YAML file overlays them and CLI flags
overlay both. The resolved settings are echoed into every run directory.
"""
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..core.errors import ConfigError
from ..core.data_io import SyntheticSpec
from ..core.graph import ModelConfig
from ..core.trainer import AugmentationConfig, TrainConfig

APP_CONFIG = Path(__file__).resolve().parents[3] / "app_config.toml"

DEFAULT_SETTINGS: Dict[str, Any] = {
    'variant': 'mini',
    'epochs': 30,
    'lambda': 0.1,
    'batch_size': 16,
    'learning_rate': 1e-3,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_epsilon': 1e-8,
    'flip_probability': 0.5,
    'rotation_degrees': 15.0,
    'workers': 1,
    'record_wall_clock': True,
    'cbam_reduction': None,
    'iterations': 3,
    'feedback': True,
    'validation_fraction': 0.1,
    'eval_batch_size': 64,
}

# settings whose default is None still have a type
_NULLABLE = {'cbam_reduction': int}


def _check_type(key: str, value: Any) -> Any:
    default = DEFAULT_SETTINGS[key]
    if value is None:
        if key in _NULLABLE:
            return None
        raise ConfigError(f"setting '{key}' cannot be null")
    expected = _NULLABLE.get(key, type(default))
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"setting '{key}' must be true/false, got {value!r}")
        return value
    if isinstance(value, bool):
        raise ConfigError(f"setting '{key}' must be {expected.__name__}, got {value!r}")
    if expected is float and isinstance(value, (int, float)):
        return float(value)
    if expected is int and isinstance(value, int):
        return value
    if expected is str and isinstance(value, str):
        return value
    raise ConfigError(f"setting '{key}' must be {expected.__name__}, got {value!r}")


class SettingsManager:
    """Defaults overlaid with an optional YAML settings file."""

    def __init__(self, path: Optional[Path] = None):
        self.config_file = Path(path) if path else None
        self.settings = self._get_default_settings()
        if self.config_file is not None:
            self.settings.update(self._load_settings(self.config_file))

    def _load_settings(self, path: Path) -> Dict[str, Any]:
        """Read and validate a YAML overlay."""
        if not path.is_file():
            raise ConfigError(f"settings file not found: {path}")
        try:
            with open(path, 'r') as f:
                loaded = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid YAML ({e})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a mapping of settings")
        checked = {}
        for key, value in loaded.items():
            if key not in DEFAULT_SETTINGS:
                raise ConfigError(f"{path}: unknown setting '{key}'")
            checked[key] = _check_type(key, value)
        return checked

    def _get_default_settings(self) -> Dict[str, Any]:
        return dict(DEFAULT_SETTINGS)

    def save_settings(self, path: Path) -> Path:
        """Write the current settings as YAML."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            yaml.safe_dump(self.settings, f, default_flow_style=False, sort_keys=True)
        return path

    def get_setting(self, key: str, default=None) -> Any:
        return self.settings.get(key, default)

    def set_setting(self, key: str, value: Any):
        if key not in DEFAULT_SETTINGS:
            raise ConfigError(f"unknown setting '{key}'")
        self.settings[key] = _check_type(key, value)

    def get_all_settings(self) -> Dict[str, Any]:
        return self.settings.copy()


def read_app_metadata(path: Path = APP_CONFIG) -> Dict[str, str]:
    """Name and version from app_config.toml."""
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except FileNotFoundError:
        return {'name': 'vcnet', 'version': 'unknown'}
    return {'name': str(data.get('name', 'vcnet')), 'version': str(data.get('version', 'unknown'))}


# -------------------------------------------------------------
# Run configuration
# -------------------------------------------------------------
@dataclass(frozen=True)
class DataSource:
    kind: str  # "idx" | "lightfield" | "synthetic"
    images: Optional[Path] = None
    labels: Optional[Path] = None
    val_images: Optional[Path] = None
    val_labels: Optional[Path] = None
    directory: Optional[Path] = None
    grid: Tuple[int, int] = (1, 1)
    per_class: int = 0

    @property
    def channels(self) -> int:
        return self.grid[0] * self.grid[1] if self.kind == "lightfield" else 1


@dataclass(frozen=True)
class RunConfig:
    command: str
    source: Optional[DataSource]
    variant: str
    epochs: int
    lam: float
    seed: int
    out_dir: Path
    checkpoint: Optional[Path]
    settings: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_args(cls, args, settings: SettingsManager) -> "RunConfig":
        command = args.command
        for flag, key in (('variant', 'variant'), ('epochs', 'epochs'), ('lam', 'lambda'),
                          ('workers', 'workers')):
            value = getattr(args, flag, None)
            if value is not None:
                settings.set_setting(key, value)
        if getattr(args, 'no_feedback', False):
            settings.set_setting('feedback', False)
        if getattr(args, 'no_wall_clock', False):
            settings.set_setting('record_wall_clock', False)

        source = _source_from_args(args)
        if command in ('train', 'eval') and source is None:
            raise ConfigError(f"{command} needs exactly one of --data-idx, --data-lf, --data-synthetic")
        seed = getattr(args, 'seed', None)
        if seed is None:
            if command in ('train', 'eval'):
                raise ConfigError(f"{command} needs --seed")
            seed = 0
        if settings.get_setting('epochs') < 0:
            raise ConfigError(f"epochs must be >= 0, got {settings.get_setting('epochs')}")
        if settings.get_setting('lambda') < 0:
            raise ConfigError(f"lambda must be >= 0, got {settings.get_setting('lambda')}")
        if settings.get_setting('workers') < 1:
            raise ConfigError(f"workers must be >= 1, got {settings.get_setting('workers')}")

        out_dir = Path(getattr(args, 'out', None) or 'runs/latest')
        checkpoint = getattr(args, 'checkpoint', None)
        return cls(command=command, source=source, variant=settings.get_setting('variant'),
                   epochs=settings.get_setting('epochs'), lam=settings.get_setting('lambda'),
                   seed=int(seed), out_dir=out_dir,
                   checkpoint=Path(checkpoint) if checkpoint else None,
                   settings=settings.get_all_settings())

    @property
    def checkpoint_path(self) -> Path:
        return self.checkpoint or self.out_dir / "checkpoint.vcn"

    def model_config(self, input_channels: int = 1, height: int = 32, width: int = 32,
                     num_classes: int = 10) -> ModelConfig:
        s = self.settings
        return ModelConfig.for_variant(self.variant, input_channels=input_channels, height=height,
                                       width=width, num_classes=num_classes,
                                       cbam_reduction=s['cbam_reduction'], iterations=s['iterations'],
                                       feedback=s['feedback'])

    def train_config(self) -> TrainConfig:
        s = self.settings
        return TrainConfig(epochs=self.epochs, lam=self.lam, batch_size=s['batch_size'],
                           learning_rate=s['learning_rate'], beta1=s['beta1'], beta2=s['beta2'],
                           adam_epsilon=s['adam_epsilon'],
                           augmentation=AugmentationConfig(s['flip_probability'], s['rotation_degrees']),
                           workers=s['workers'], eval_batch_size=s['eval_batch_size'],
                           record_wall_clock=s['record_wall_clock'])

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(samples_per_class=self.source.per_class, seed=self.seed,
                             test_fraction=self.settings['validation_fraction'])


def _source_from_args(args) -> Optional[DataSource]:
    chosen = []
    if getattr(args, 'data_idx', None):
        images, labels = args.data_idx
        val = getattr(args, 'val_idx', None) or (None, None)
        chosen.append(DataSource('idx', images=Path(images), labels=Path(labels),
                                 val_images=Path(val[0]) if val[0] else None,
                                 val_labels=Path(val[1]) if val[1] else None))
    elif getattr(args, 'val_idx', None):
        raise ConfigError("--val-idx requires --data-idx")
    if getattr(args, 'data_lf', None):
        grid = getattr(args, 'grid', None)
        if not grid:
            raise ConfigError("--data-lf requires --grid U V")
        if min(grid) < 1:
            raise ConfigError(f"--grid must be positive, got {grid[0]} {grid[1]}")
        chosen.append(DataSource('lightfield', directory=Path(args.data_lf), grid=(grid[0], grid[1])))
    if getattr(args, 'data_synthetic', None) is not None:
        if args.data_synthetic < 2:
            raise ConfigError(f"--data-synthetic needs at least 2 samples per class, got {args.data_synthetic}")
        chosen.append(DataSource('synthetic', per_class=args.data_synthetic))
    if len(chosen) > 1:
        raise ConfigError("choose exactly one dataset source, got " + ", ".join(s.kind for s in chosen))
    return chosen[0] if chosen else None
