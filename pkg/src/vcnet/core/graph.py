"""
Dual-stream VCNet graph: cortical areas, feedforward edges, the AIT -> V1
feedback edge, the classification head, and two-pass execution.
"""
from __future__ import annotations

import dataclasses
import heapq
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .blocks import (Block, CBAMBlock, ConvStageBlock, LateralBlock, MultiScaleV1Block, NeuromodBlock,
                     PredictionError, RecurrentBlock, TopDownBlock, predictive_error)
from .checkpoint import encoded_size
from .errors import ConfigError, CycleError, GraphError, ShapeError
from .ops import concat_channels, dense, pool
from .tensor import DTYPE, Tensor, active_tape, reshape

logger = logging.getLogger(__name__)

AREA_NAMES = ("V1", "V2_interstripe", "V2_thin", "V2_thick", "V4", "PIT", "CIT", "AIT",
              "MT", "MST", "Parietal")

FEEDFORWARD_EDGES = (
    # ventral
    ("V1", "V2_interstripe"), ("V1", "V2_thin"),
    ("V2_interstripe", "V4"), ("V2_thin", "V4"),
    ("V4", "PIT"), ("PIT", "CIT"), ("CIT", "AIT"),
    # dorsal
    ("V1", "V2_thick"), ("V2_thick", "MT"), ("MT", "MST"), ("MST", "Parietal"),
    # cross-stream
    ("V2_thick", "V4"), ("MST", "AIT"),
)
FEEDBACK_EDGE = ("AIT", "V1")

# 2x average pool on entry
DOWNSAMPLED_AREAS = frozenset({"V4", "MT", "CIT", "MST"})

VARIANT_WIDTHS = {
    "full": {"V1": 24, "V2_interstripe": 24, "V2_thin": 24, "V2_thick": 24, "V4": 32, "PIT": 32,
             "CIT": 48, "AIT": 48, "MT": 24, "MST": 24, "Parietal": 24},
    "mini": {"V1": 6, "V2_interstripe": 6, "V2_thin": 6, "V2_thick": 6, "V4": 9, "PIT": 9,
             "CIT": 12, "AIT": 12, "MT": 6, "MST": 6, "Parietal": 6},
}
# reduction must divide the V1, V4 and MT widths
VARIANT_REDUCTION = {"full": 4, "mini": 3}

MINI_PARAMETER_BUDGET = 12_000


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of a VCNet variant."""
    input_channels: int = 1
    height: int = 32
    width: int = 32
    num_classes: int = 10
    widths: Mapping[str, int] = field(default_factory=lambda: dict(VARIANT_WIDTHS["mini"]))
    cbam_reduction: int = VARIANT_REDUCTION["mini"]
    iterations: int = 3
    variant: str = "mini"
    feedback: bool = True

    @classmethod
    def for_variant(cls, variant: str, input_channels: int = 1, height: int = 32, width: int = 32,
                    num_classes: int = 10, cbam_reduction: Optional[int] = None,
                    iterations: int = 3, feedback: bool = True) -> "ModelConfig":
        """Config with the variant's widths. ``cbam_reduction=None`` picks the variant default."""
        if variant not in VARIANT_WIDTHS:
            raise ConfigError(f"unknown variant '{variant}', expected one of {sorted(VARIANT_WIDTHS)}")
        return cls(input_channels=input_channels, height=height, width=width, num_classes=num_classes,
                   widths=dict(VARIANT_WIDTHS[variant]),
                   cbam_reduction=VARIANT_REDUCTION[variant] if cbam_reduction is None else cbam_reduction,
                   iterations=iterations, variant=variant, feedback=feedback)

    @property
    def input_shape(self) -> Tuple[int, int, int]:
        return self.input_channels, self.height, self.width

    def validate(self) -> None:
        for key in ("input_channels", "height", "width", "num_classes", "iterations", "cbam_reduction"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")
        missing = [a for a in AREA_NAMES if a not in self.widths]
        if missing:
            raise ConfigError(f"missing channel widths for {', '.join(missing)}")
        for area, width in self.widths.items():
            if area not in AREA_NAMES:
                raise ConfigError(f"unknown area '{area}' in widths")
            if width < 1:
                raise ConfigError(f"width of {area} must be positive, got {width}")
        if self.widths["V1"] % 3:
            raise ConfigError(f"V1 width {self.widths['V1']} must be divisible by 3")
        if self.variant not in VARIANT_WIDTHS:
            raise ConfigError(f"unknown variant '{self.variant}'")


@dataclass(frozen=True)
class AreaNode:
    """One cortical area: ordered blocks applied after the optional 2x pool."""
    name: str
    channels: int
    blocks: Tuple[Tuple[str, Block], ...]
    downsample: bool = False

    def block_kinds(self) -> Tuple[str, ...]:
        return tuple(block.kind for _, block in self.blocks)


@dataclass(frozen=True)
class StreamGraph:
    """Compiled network. Immutable: updated parameters produce a new graph."""
    config: ModelConfig
    nodes: Mapping[str, AreaNode]
    edges: Tuple[Tuple[str, str], ...]
    feedback_edge: Optional[Tuple[str, str]]
    top_down: TopDownBlock
    parameters: Mapping[str, np.ndarray]

    def with_parameters(self, parameters: Mapping[str, np.ndarray]) -> "StreamGraph":
        if set(parameters) != set(self.parameters):
            raise ShapeError("parameter names differ from the graph's")
        for name, value in parameters.items():
            if value.shape != self.parameters[name].shape:
                raise ShapeError(f"parameter {name}: shape {value.shape} != {self.parameters[name].shape}")
        return dataclasses.replace(self, parameters=dict(parameters))


class ForwardOutput(NamedTuple):
    logits: Tensor
    epsilon: PredictionError


# -------------------------------------------------------------
# Construction
# -------------------------------------------------------------
def _area_blocks(name: str, in_channels: int, config: ModelConfig) -> Tuple[Tuple[str, Block], ...]:
    c = config.widths[name]
    r = config.cbam_reduction
    if name == "V1":
        return (("msv1", MultiScaleV1Block(in_channels, c)), ("lateral", LateralBlock(c)),
                ("cbam", CBAMBlock(c, r)), ("neuromod", NeuromodBlock(c)))
    blocks: List[Tuple[str, Block]] = [("stage", ConvStageBlock(in_channels, c))]
    if name in ("MT", "MST"):
        blocks.append(("recurrent", RecurrentBlock(c, config.iterations)))
    if name in ("MT", "V4"):
        blocks += [("cbam", CBAMBlock(c, r)), ("neuromod", NeuromodBlock(c))]
    return tuple(blocks)


def _topological(nodes: Sequence[str], edges: Sequence[Tuple[str, str]]) -> List[str]:
    indegree = {n: 0 for n in nodes}
    children: Dict[str, List[str]] = {n: [] for n in nodes}
    for a, b in edges:
        if a not in indegree or b not in indegree:
            raise GraphError("edges connect known areas", f"{a} -> {b}")
        indegree[b] += 1
        children[a].append(b)
    ready = [n for n, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for child in children[n]:
            indegree[child] -= 1
            if indegree[child] == 0:
                heapq.heappush(ready, child)
    if len(order) != len(nodes):
        raise CycleError(n for n, d in indegree.items() if d > 0)
    return order


def execution_order(graph: StreamGraph) -> List[str]:
    """Topological order of feedforward edges, ties broken lexically."""
    return _topological(list(graph.nodes), graph.edges)


def validate_graph(graph: StreamGraph) -> None:
    names = list(graph.nodes)
    if len(set(names)) != len(names):
        raise GraphError("area names are unique")
    for name in names:
        if name not in AREA_NAMES:
            raise GraphError("area names are cortical areas", name)
    order = execution_order(graph)
    if order[0] != "V1":
        raise GraphError("V1 is the only source", f"order starts with {order[0]}")
    reachable = {"V1"}
    for name in order:
        if name in reachable:
            reachable.update(b for a, b in graph.edges if a == name)
    unreachable = sorted(set(names) - reachable)
    if unreachable:
        raise GraphError("every area is reachable from V1", ", ".join(unreachable))
    ait_in = sum(1 for _, b in graph.edges if b == "AIT")
    if ait_in < 2:
        raise GraphError("AIT receives convergent inputs (in-degree >= 2)", f"in-degree {ait_in}")
    if graph.config.feedback and graph.feedback_edge != FEEDBACK_EDGE:
        raise GraphError("exactly one feedback edge, AIT -> V1", str(graph.feedback_edge))
    if not graph.config.feedback and graph.feedback_edge is not None:
        raise GraphError("feedback edge absent when feedback is disabled", str(graph.feedback_edge))

    required = {"V1": {"multi_scale_v1", "lateral", "cbam", "neuromod"},
                "MT": {"recurrent", "cbam", "neuromod"}, "MST": {"recurrent"},
                "V4": {"cbam", "neuromod"}}
    for name, kinds in required.items():
        missing = kinds - set(graph.nodes[name].block_kinds())
        if missing:
            raise GraphError(f"{name} contains {', '.join(sorted(kinds))}",
                             "missing " + ", ".join(sorted(missing)))


def build_model(config: ModelConfig, seed: int = 0) -> StreamGraph:
    """Wire the dual-stream graph and initialise every parameter from ``seed``."""
    config.validate()
    edges = FEEDFORWARD_EDGES
    order = _topological(list(AREA_NAMES), edges)

    nodes: Dict[str, AreaNode] = {}
    for name in order:
        preds = [a for a, b in edges if b == name]
        in_channels = config.input_channels if name == "V1" else sum(nodes[p].channels for p in preds)
        nodes[name] = AreaNode(name, config.widths[name], _area_blocks(name, in_channels, config),
                               downsample=name in DOWNSAMPLED_AREAS)
    nodes = {name: nodes[name] for name in AREA_NAMES}
    top_down = TopDownBlock(config.widths["AIT"], config.widths["V1"])

    rng = np.random.default_rng(seed)
    parameters: Dict[str, np.ndarray] = {}
    for name in order:
        for block_name, block in nodes[name].blocks:
            for key, value in block.initial_values(rng).items():
                parameters[f"{name}.{block_name}.{key}"] = value
    for key, value in top_down.initial_values(rng).items():
        parameters[f"top_down.{key}"] = value
    c_ait = config.widths["AIT"]
    bound = np.sqrt(1.0 / c_ait)
    parameters["head.w"] = rng.uniform(-bound, bound, size=(c_ait, config.num_classes)).astype(DTYPE)
    parameters["head.b"] = np.zeros(config.num_classes, dtype=DTYPE)

    graph = StreamGraph(config=config, nodes=nodes, edges=edges,
                        feedback_edge=FEEDBACK_EDGE if config.feedback else None,
                        top_down=top_down, parameters=parameters)
    validate_graph(graph)
    total = parameter_count(graph)
    if config.variant == "mini" and total > MINI_PARAMETER_BUDGET:
        raise GraphError(f"mini variant has at most {MINI_PARAMETER_BUDGET} parameters", f"got {total}")
    logger.debug("built %s variant: %d parameters", config.variant, total)
    return graph


# -------------------------------------------------------------
# Budgets
# -------------------------------------------------------------
def parameter_count(graph: StreamGraph) -> int:
    return int(sum(v.size for v in graph.parameters.values()))


def block_parameter_counts(graph: StreamGraph) -> Dict[str, int]:
    """Trainable scalars per block, keyed "<area>.<block>", plus top_down and head."""
    counts: Dict[str, int] = {}
    for name, value in graph.parameters.items():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in graph.nodes else parts[0]
        counts[key] = counts.get(key, 0) + int(value.size)
    return counts


def serialized_size_bytes(graph: StreamGraph) -> int:
    return encoded_size(graph.parameters)


# -------------------------------------------------------------
# Execution
# -------------------------------------------------------------
def bind_parameters(graph: StreamGraph) -> Dict[str, Tensor]:
    """Parameters as Tensors, watched on the active tape when there is one."""
    tape = active_tape()
    if tape is not None:
        return tape.watch_all(graph.parameters)
    return {name: Tensor(value) for name, value in graph.parameters.items()}


def _scope(params: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def forward(graph: StreamGraph, batch: Tensor,
            params: Optional[Mapping[str, Tensor]] = None) -> ForwardOutput:
    """Two-pass execution: feedforward sweep, then the AIT -> V1 prediction error."""
    if not isinstance(batch, Tensor):
        batch = Tensor(batch)
    if batch.ndim != 4 or batch.shape[1:] != graph.config.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match [N, "
                         f"{', '.join(map(str, graph.config.input_shape))}]")
    if params is None:
        params = bind_parameters(graph)

    outputs: Dict[str, Tensor] = {}
    order = execution_order(graph)
    for name in order:
        node = graph.nodes[name]
        if name == "V1":
            x = batch
        else:
            preds = [p for p in order if (p, name) in graph.edges]
            x = concat_channels([outputs[p] for p in preds])
        if node.downsample:
            x = pool(x, "avg", 2, 2)
        for block_name, block in node.blocks:
            x = block(x, _scope(params, f"{name}.{block_name}."))
        outputs[name] = x

    ait, v1 = outputs["AIT"], outputs["V1"]
    n, c_ait = ait.shape[:2]
    logits = dense(reshape(pool(ait, "global_avg"), (n, c_ait)), params["head.w"], params["head.b"])

    if graph.feedback_edge is not None:
        prediction = graph.top_down(ait, _scope(params, "top_down."), target_hw=v1.shape[2:])
    else:
        prediction = Tensor(np.zeros(v1.shape, dtype=DTYPE))
    return ForwardOutput(logits, predictive_error(v1, prediction))
