"""
Checkpoint codec.

Layout (little-endian):
    b"VCN1" | version u32 | tensor count u32 |
    per tensor: name length u16, UTF-8 name, rank u8, extents u64 x rank,
                float32 data (row-major)
Parameters are stored as float32 and widened back to float64 on load.
"""
import logging
import math
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import CheckpointFormatError, CheckpointMismatchError, CheckpointNotFoundError
from .tensor import DTYPE

logger = logging.getLogger(__name__)

MAGIC = b"VCN1"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encoded_size(parameters: Mapping[str, np.ndarray]) -> int:
    """Exact byte length of encode_checkpoint(parameters)."""
    size = _HEADER.size
    for name, value in parameters.items():
        size += 2 + len(name.encode("utf-8")) + 1 + 8 * value.ndim + 4 * value.size
    return size


def encode_checkpoint(parameters: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named parameters in insertion order. Values are narrowed to float32."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(parameters))]
    for name, value in parameters.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    """Parse a checkpoint blob.

    Raises CheckpointFormatError for a bad header, a malformed tensor record,
    a size that runs past the end of the blob, or trailing bytes. ``source``
    only labels the error messages.
    """
    view = memoryview(blob)
    offset = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointFormatError(f"{source}: truncated while reading {what}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    magic, version, count = _HEADER.unpack(take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported version {version}")

    parameters: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(
                f"{source}: tensor name at byte {offset - name_len} is not UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"extents of {name}"))
        size = math.prod(shape)
        if 4 * size > len(view) - offset:
            raise CheckpointFormatError(
                f"{source}: truncated, tensor {name} declares {size} values but {len(view) - offset} bytes remain")
        data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
        parameters[name] = data.astype(DTYPE).reshape(shape)
    if offset != len(view):
        raise CheckpointFormatError(f"{source}: {len(view) - offset} trailing bytes")
    return parameters


def save_checkpoint(parameters: Mapping[str, np.ndarray], path) -> Path:
    """Write the encoded checkpoint to ``path``, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(parameters))
    logger.info("saved checkpoint %s (%d tensors)", path, len(parameters))
    return path


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    """Read and decode ``path``; a missing file raises CheckpointNotFoundError."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointNotFoundError(f"checkpoint not found: {path}")
    parameters = decode_checkpoint(path.read_bytes(), source=str(path))
    logger.info("loaded checkpoint %s (%d tensors)", path, len(parameters))
    return parameters


def restore_checkpoint(graph, path):
    """Return ``graph`` carrying the parameters stored at ``path``."""
    loaded = load_checkpoint(path)
    expected = graph.parameters
    missing = sorted(set(expected) - set(loaded))
    extra = sorted(set(loaded) - set(expected))
    if missing or extra:
        raise CheckpointMismatchError(
            f"{path}: checkpoint does not match the configured {graph.config.variant} model "
            f"(missing {missing[:3]}, unexpected {extra[:3]})")
    for name, value in expected.items():
        if loaded[name].shape != value.shape:
            raise CheckpointMismatchError(
                f"{path}: tensor {name} has shape {loaded[name].shape}, model expects {value.shape}")
    return graph.with_parameters({name: loaded[name] for name in expected})
