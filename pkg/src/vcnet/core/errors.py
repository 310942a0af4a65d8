"""
Exception hierarchy for vcnet.
Every error raised on purpose by the package derives from VCNetError.
"""


class VCNetError(Exception):
    """Base class for all vcnet errors."""


class ConfigError(VCNetError, ValueError):
    """Invalid setting, flag combination or model configuration."""


class ShapeError(VCNetError, ValueError):
    """Tensor shapes or extents are inconsistent with an operation."""


class LabelError(VCNetError, ValueError):
    """Class index outside [0, K)."""


class GraphError(VCNetError):
    """A stream-graph construction rule is violated."""

    def __init__(self, rule: str, detail: str = ""):
        self.rule = rule
        message = f"graph rule violated: {rule}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class CycleError(GraphError):
    """Feedforward edges contain a cycle."""

    def __init__(self, nodes):
        self.nodes = tuple(sorted(nodes))
        super().__init__("feedforward edges must be acyclic",
                         "cycle through " + ", ".join(self.nodes))


# -------------------------------------------------------------
# Dataset ingestion
# -------------------------------------------------------------
class DataFormatError(VCNetError):
    """A dataset file or directory does not follow its declared format."""

    def __init__(self, path, detail: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {detail}")


class WrongMagicError(DataFormatError):
    """IDX magic number is not the expected one."""


class TruncatedFileError(DataFormatError):
    """File ends before the declared payload."""


class CountMismatchError(DataFormatError):
    """Image and label counts disagree."""


class LabelRangeError(DataFormatError):
    """A stored label is outside the configured class count."""


class PGMFormatError(DataFormatError):
    """A view file is not an 8-bit binary PGM (P5)."""


class MissingViewError(DataFormatError):
    """A light-field sample lacks one of its U x V view files."""


class InconsistentViewShapeError(DataFormatError):
    """Light-field views do not share one spatial extent."""


# -------------------------------------------------------------
# Checkpoints
# -------------------------------------------------------------
class CheckpointError(VCNetError):
    """Base class for checkpoint problems."""


class CheckpointNotFoundError(CheckpointError, FileNotFoundError):
    """Checkpoint path does not exist."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version or truncated checkpoint."""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint tensors do not match the configured model."""
