"""
Dataset ingestion: IDX image/label pairs, light-field directories of PGM
views, and a procedural texture generator for desk-scale runs.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (ConfigError, CountMismatchError, DataFormatError, InconsistentViewShapeError,
                     LabelRangeError, MissingViewError, PGMFormatError, TruncatedFileError,
                     WrongMagicError)
from .tensor import Tensor

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledImage:
    pixels: Tensor  # [C, H, W], values in [0, 1]
    label: int


@dataclass(frozen=True)
class LightFieldSample:
    views: Tensor  # [U*V, H, W], row-major angular order
    label: int

    @property
    def pixels(self) -> Tensor:
        return self.views


# -------------------------------------------------------------
# IDX
# -------------------------------------------------------------
def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _idx_header(blob: bytes, path, magic: int, rank: int) -> Tuple[int, ...]:
    header_size = 4 + 4 * rank
    if len(blob) < 4:
        raise TruncatedFileError(path, "file ends inside the magic number")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise WrongMagicError(path, f"magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(blob) < header_size:
        raise TruncatedFileError(path, "file ends inside the dimension header")
    dims = struct.unpack(f">{rank}I", blob[4:header_size])
    expected = header_size + int(np.prod(dims))
    if len(blob) < expected:
        raise TruncatedFileError(path, f"{len(blob)} bytes, header promises {expected}")
    return dims


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> List[LabeledImage]:
    """Parse a big-endian IDX image/label pair; pixels are scaled by 1/255."""
    image_blob = _read_bytes(images_path)
    label_blob = _read_bytes(labels_path)
    n_images, rows, cols = _idx_header(image_blob, images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,) = _idx_header(label_blob, labels_path, IDX_LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise CountMismatchError(labels_path, f"{n_labels} labels for {n_images} images")

    pixels = np.frombuffer(image_blob, dtype=np.uint8, count=n_images * rows * cols, offset=16)
    pixels = pixels.reshape(n_images, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(label_blob, dtype=np.uint8, count=n_labels, offset=8)
    if num_classes is not None and n_labels and int(labels.max()) >= num_classes:
        raise LabelRangeError(labels_path, f"label {int(labels.max())} outside [0, {num_classes})")

    logger.info("%d images (%dx%d) loaded from %s", n_images, rows, cols, images_path)
    return [LabeledImage(Tensor(pixels[i]), int(labels[i])) for i in range(n_images)]


def write_idx(images_path, labels_path, samples: Sequence[LabeledImage]) -> None:
    """Inverse of load_idx for single-channel images (values rounded to 1/255)."""
    if not samples:
        raise ConfigError("write_idx needs at least one sample")
    _, rows, cols = samples[0].pixels.shape
    images = np.stack([s.pixels.data.reshape(rows, cols) for s in samples])
    quantized = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.array([s.label for s in samples], dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, len(samples), rows, cols)
                                  + quantized.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(samples)) + labels.tobytes())


# -------------------------------------------------------------
# PGM + light fields
# -------------------------------------------------------------
def read_pgm(path) -> np.ndarray:
    """8-bit binary PGM (P5) as a float array in [0, 1]."""
    path = Path(path)
    blob = path.read_bytes()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMFormatError(path, "header ends early")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace before the raster
    if tokens[0] != b"P5":
        raise PGMFormatError(path, f"magic {tokens[0]!r}, expected b'P5'")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PGMFormatError(path, "non-numeric header field") from None
    if not 0 < maxval < 256:
        raise PGMFormatError(path, f"maxval {maxval} is not 8-bit")
    raster = blob[pos:pos + width * height]
    if len(raster) < width * height:
        raise PGMFormatError(path, f"raster has {len(raster)} bytes, expected {width * height}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).astype(np.float64) / maxval


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    height, width = image.shape
    raster = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode("ascii") + raster.tobytes())


def view_filename(row: int, col: int) -> str:
    return f"view_{row}_{col}.pgm"


def lightfield_class_names(directory) -> List[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"light-field directory not found: {directory}")
    return sorted(p.name for p in directory.iterdir() if p.is_dir())


def load_lightfield(directory, grid_u: int, grid_v: int) -> List[LightFieldSample]:
    """Load class_name/sample_id/view_r_c.pgm into [U*V, H, W] samples.

    Classes are labelled in sorted name order; views are stacked row-major
    over the angular grid. All views must already share H x W.
    """
    if grid_u < 1 or grid_v < 1:
        raise ConfigError(f"angular grid must be positive, got {grid_u}x{grid_v}")
    directory = Path(directory)
    samples: List[LightFieldSample] = []
    extent: Optional[Tuple[int, int]] = None
    for label, class_name in enumerate(lightfield_class_names(directory)):
        for sample_dir in sorted(p for p in (directory / class_name).iterdir() if p.is_dir()):
            views = []
            for r in range(grid_u):
                for c in range(grid_v):
                    path = sample_dir / view_filename(r, c)
                    if not path.is_file():
                        raise MissingViewError(path, f"missing view ({r}, {c})")
                    view = read_pgm(path)
                    if extent is None:
                        extent = view.shape
                    elif view.shape != extent:
                        raise InconsistentViewShapeError(path, f"view is {view.shape}, expected {extent}")
                    views.append(view)
            samples.append(LightFieldSample(Tensor(np.stack(views)), label))
    if not samples:
        raise DataFormatError(directory, "no light-field samples found")
    logger.info("%d light-field samples (%dx%d views) loaded from %s", len(samples), grid_u, grid_v, directory)
    return samples


def write_lightfield(directory, samples: Sequence[LightFieldSample], class_names: Sequence[str],
                     grid_u: int, grid_v: int) -> Path:
    directory = Path(directory)
    counters: Dict[int, int] = {}
    for sample in samples:
        index = counters.get(sample.label, 0)
        counters[sample.label] = index + 1
        sample_dir = directory / class_names[sample.label] / f"{index:05d}"
        sample_dir.mkdir(parents=True, exist_ok=True)
        for i, view in enumerate(sample.views.data):
            r, c = divmod(i, grid_v)
            write_pgm(sample_dir / view_filename(r, c), view)
    return directory


# -------------------------------------------------------------
# Synthetic textures
# -------------------------------------------------------------
FAMILIES = ("spots", "stripes", "rings", "checker", "noise-blotch", "gradient-spots",
            "dense-spots", "sparse-spots", "diagonal-stripes", "hex-dots")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    families: Tuple[str, ...] = FAMILIES
    image_size: int = 32
    samples_per_class: int = 220
    seed: int = 0
    test_fraction: float = 0.1
    noise: float = 0.03

    def validate(self) -> None:
        if self.samples_per_class < 2:
            raise ConfigError(f"samples_per_class must be >= 2, got {self.samples_per_class}")
        if len(set(self.families)) != len(self.families):
            raise ConfigError("pattern families must be pairwise distinct")
        unknown = [f for f in self.families if f not in _PATTERNS]
        if unknown:
            raise ConfigError(f"unknown pattern families: {', '.join(unknown)}")
        if not 1 <= self.num_classes <= len(self.families):
            raise ConfigError(f"num_classes {self.num_classes} needs as many families")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")

    @property
    def test_per_class(self) -> int:
        return min(self.samples_per_class - 1, max(1, round(self.samples_per_class * self.test_fraction)))


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    y, x = np.mgrid[0:size, 0:size]
    return y.astype(np.float64), x.astype(np.float64)


def _rotated(size: int, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    y, x = _grid(size)
    return x * np.cos(theta) + y * np.sin(theta), -x * np.sin(theta) + y * np.cos(theta)


def _blobs(size: int, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
    y, x = _grid(size)
    img = np.zeros((size, size))
    for (cy, cx), r in zip(centers, radii):
        img += np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2.0 * r * r))
    return np.clip(img, 0.0, 1.0)


def _random_blobs(rng, size, count_range, radius_range):
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    return _blobs(size, rng.uniform(0, size, (count, 2)), rng.uniform(*radius_range, count))


def _stripes(rng, size, center_deg, jitter_deg):
    theta = np.radians(center_deg + rng.uniform(-jitter_deg, jitter_deg))
    u, _ = _rotated(size, theta)
    period = rng.uniform(5.0, 8.0)
    return 0.5 + 0.5 * np.sin(2 * np.pi * u / period + rng.uniform(0, 2 * np.pi))


def _pattern_spots(rng, size):
    return _random_blobs(rng, size, (10, 16), (1.5, 2.5))


def _pattern_stripes(rng, size):
    return _stripes(rng, size, 0.0, 10.0)


def _pattern_diagonal_stripes(rng, size):
    return _stripes(rng, size, 45.0, 8.0)


def _pattern_rings(rng, size):
    y, x = _grid(size)
    cy, cx = rng.uniform(size * 0.25, size * 0.75, 2)
    r = np.hypot(y - cy, x - cx)
    return 0.5 + 0.5 * np.sin(2 * np.pi * r / rng.uniform(4.0, 7.0) + rng.uniform(0, 2 * np.pi))


def _pattern_checker(rng, size):
    u, v = _rotated(size, np.radians(rng.uniform(-10.0, 10.0)))
    cell = rng.uniform(3.0, 6.0)
    off_u, off_v = rng.uniform(0, 2 * cell, 2)
    return 0.5 + 0.5 * np.sign(np.sin(np.pi * (u + off_u) / cell) * np.sin(np.pi * (v + off_v) / cell))


def _pattern_noise_blotch(rng, size):
    img = rng.random((size, size))
    for _ in range(3):
        acc = np.zeros_like(img)
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                acc += np.roll(img, (dy, dx), axis=(0, 1))
        img = acc / 25.0
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.full_like(img, 0.5)


def _pattern_gradient_spots(rng, size):
    u, _ = _rotated(size, rng.uniform(0, 2 * np.pi))
    ramp = (u - u.min()) / (u.max() - u.min())
    return _random_blobs(rng, size, (10, 14), (1.5, 2.5)) * (0.15 + 0.85 * ramp)


def _pattern_dense_spots(rng, size):
    return _random_blobs(rng, size, (30, 45), (0.8, 1.3))


def _pattern_sparse_spots(rng, size):
    return _random_blobs(rng, size, (2, 4), (4.0, 6.0))


def _pattern_hex_dots(rng, size):
    spacing = rng.uniform(6.0, 8.0)
    theta = rng.uniform(0, np.pi / 3)
    a1 = spacing * np.array([np.cos(theta), np.sin(theta)])
    a2 = spacing * np.array([np.cos(theta + np.pi / 3), np.sin(theta + np.pi / 3)])
    origin = rng.uniform(0, spacing, 2)
    reach = int(np.ceil(2 * size / spacing)) + 1
    i, j = np.meshgrid(np.arange(-reach, reach + 1), np.arange(-reach, reach + 1))
    points = origin + i.reshape(-1, 1) * a1 + j.reshape(-1, 1) * a2
    keep = np.all((points > -3) & (points < size + 3), axis=1)
    points = points[keep]
    return _blobs(size, points, np.full(len(points), 1.2))


_PATTERNS: Dict[str, Callable[[np.random.Generator, int], np.ndarray]] = {
    "spots": _pattern_spots,
    "stripes": _pattern_stripes,
    "rings": _pattern_rings,
    "checker": _pattern_checker,
    "noise-blotch": _pattern_noise_blotch,
    "gradient-spots": _pattern_gradient_spots,
    "dense-spots": _pattern_dense_spots,
    "sparse-spots": _pattern_sparse_spots,
    "diagonal-stripes": _pattern_diagonal_stripes,
    "hex-dots": _pattern_hex_dots,
}


def synthetic_texture(spec: SyntheticSpec, class_index: int, sample_index: int,
                      size: Optional[int] = None) -> np.ndarray:
    """One texture image; a pure function of (spec, class_index, sample_index)."""
    size = size or spec.image_size
    rng = np.random.default_rng([spec.seed, class_index, sample_index])
    img = _PATTERNS[spec.families[class_index]](rng, size)
    img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> Tuple[List[LabeledImage], List[LabeledImage]]:
    """Balanced train/test texture datasets; the last indices of each class are test."""
    spec.validate()
    n_test = spec.test_per_class
    train, test = [], []
    for k in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            sample = LabeledImage(Tensor(synthetic_texture(spec, k, i)[None]), k)
            (test if i >= spec.samples_per_class - n_test else train).append(sample)
    logger.info("generated %d train / %d test synthetic samples (%d classes)",
                len(train), len(test), spec.num_classes)
    return train, test


def generate_synthetic_lightfield(spec: SyntheticSpec, grid_u: int, grid_v: int,
                                  disparity: int = 1) -> Tuple[List[LightFieldSample], List[LightFieldSample]]:
    """Light fields whose U x V views are parallax shifts of one synthetic texture."""
    spec.validate()
    n_test = spec.test_per_class
    cu, cv = (grid_u - 1) / 2.0, (grid_v - 1) / 2.0
    train, test = [], []
    for k in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            base = synthetic_texture(spec, k, i)
            views = [np.roll(base, (int(round((r - cu) * disparity)), int(round((c - cv) * disparity))),
                             axis=(0, 1))
                     for r in range(grid_u) for c in range(grid_v)]
            sample = LightFieldSample(Tensor(np.stack(views)), k)
            (test if i >= spec.samples_per_class - n_test else train).append(sample)
    return train, test


def directional_energy_ratio(images: np.ndarray) -> float:
    """Contrast of lag-1 autocorrelation between the x and y axes.

    E_axis = mean squared first difference along that axis (2 * (R(0) - R(1))
    for a stationary field); returns max(E_x, E_y) / min(E_x, E_y). Leading
    axes are pooled, so a stack of images gives the class-level ratio.
    """
    images = np.asarray(images, dtype=np.float64)
    ex = np.mean(np.diff(images, axis=-1) ** 2)
    ey = np.mean(np.diff(images, axis=-2) ** 2)
    lo, hi = min(ex, ey), max(ex, ey)
    return float(hi / lo) if lo > 0 else float("inf")


def split_dataset(samples: Sequence, validation_fraction: float, seed: int) -> Tuple[list, list]:
    """Seeded shuffle-and-split used when no published validation split exists."""
    if not samples:
        raise ConfigError("cannot split an empty dataset")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = min(len(samples) - 1, max(1, round(len(samples) * validation_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val
