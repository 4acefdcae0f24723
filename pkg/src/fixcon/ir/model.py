"""Computation-graph data types.

Models are immutable values: every rewrite builds a new ``GraphModel``.
Tensors are plain numpy arrays (``float32`` for weights and activations,
``uint8`` for raw images) stored read-only inside nodes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from types import MappingProxyType
from typing import Any, Iterable, Mapping

import numpy as np

Tensor = np.ndarray

LAYOUTS = ("NCHW", "NHWC")
TENSOR_DTYPES = (np.dtype(np.float32), np.dtype(np.uint8))

# Pseudo node id standing for the model input in dominator analyses.
ENTRY = "@input"

HYPERPARAMS = ("padding", "strides", "kernel_shape", "dilations", "epsilon", "min", "max", "axis", "perm")
_INT_LIST_ATTRS = frozenset({"padding", "strides", "kernel_shape", "dilations", "perm"})
_FLOAT_ATTRS = frozenset({"epsilon", "min", "max"})

WEIGHT_ROLES = ("weight", "bias", "scale", "mean", "var", "pads_spec", "perm", "target_shape", "indices")
# Roles holding learned parameters, as opposed to structural constants.
PARAM_ROLES = ("weight", "bias", "scale", "mean", "var")


@dataclass(frozen=True)
class OpSchema:
    attrs: frozenset[str] = frozenset()
    required_weights: frozenset[str] = frozenset()
    optional_weights: frozenset[str] = frozenset()
    min_inputs: int = 1
    max_inputs: int = 1


def _schema(attrs=(), required=(), optional=(), min_inputs=1, max_inputs=1) -> OpSchema:
    return OpSchema(frozenset(attrs), frozenset(required), frozenset(optional), min_inputs, max_inputs)


OP_SCHEMAS: Mapping[str, OpSchema] = MappingProxyType({
    "Conv": _schema(("strides", "padding", "dilations", "kernel_shape"), ("weight",), ("bias",)),
    "BatchNormalization": _schema(("epsilon",), ("scale", "bias", "mean", "var")),
    "Pad": _schema((), ("pads_spec",)),
    "Transpose": _schema(("perm",), (), ("perm",)),
    "Flatten": _schema(),
    "Reshape": _schema((), ("target_shape",)),
    "Add": _schema(("axis",), (), ("bias",), 1, 2),
    "Mul": _schema(("axis",), (), ("scale",), 1, 2),
    "Gather": _schema(("axis",), ("indices",)),
    "Unsqueeze": _schema(("axis",)),
    "Clip": _schema(("min", "max")),
    "Relu": _schema(),
    "GlobalAvgPool": _schema(),
    "Gemm": _schema((), ("weight",), ("bias",)),
    "Softmax": _schema(("axis",)),
})

SUPPORTED_OPS = tuple(OP_SCHEMAS)


def canonical_attr(name: str, value: Any) -> Any:
    """Normalise an attribute value so equal hyperparameters compare equal."""
    if name in _INT_LIST_ATTRS:
        return tuple(int(v) for v in value)
    if name in _FLOAT_ATTRS:
        return float(value)
    if name == "axis":
        return int(value)
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _frozen_array(value: Any) -> np.ndarray:
    arr = np.array(value, copy=True)
    if arr.dtype not in TENSOR_DTYPES:
        if np.issubdtype(arr.dtype, np.floating) or np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.float32)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class PreprocessingConfig:
    scale: float = 1.0 / 255.0
    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)
    layout: str = "NCHW"

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "std", tuple(float(v) for v in self.std))

    def to_dict(self) -> dict[str, Any]:
        return {"scale": self.scale, "mean": list(self.mean), "std": list(self.std), "layout": self.layout}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> PreprocessingConfig:
        return cls(data["scale"], tuple(data["mean"]), tuple(data["std"]), data.get("layout", "NCHW"))


@dataclass(frozen=True)
class InputSpec:
    name: str
    shape: tuple[int, ...]
    layout: str = "NCHW"

    def __post_init__(self) -> None:
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def spatial(self) -> tuple[int, int]:
        """(height, width) read according to the layout tag."""
        if self.layout == "NHWC":
            return self.shape[1], self.shape[2]
        return self.shape[2], self.shape[3]


@dataclass(frozen=True, eq=False)
class NodeDef:
    id: str
    op: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)
    weights: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "outputs", tuple(self.outputs))
        attrs = {k: canonical_attr(k, v) for k, v in sorted(self.attrs.items())}
        object.__setattr__(self, "attrs", MappingProxyType(attrs))
        weights = {k: _frozen_array(v) for k, v in sorted(self.weights.items())}
        object.__setattr__(self, "weights", MappingProxyType(weights))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NodeDef):
            return NotImplemented
        if (self.id, self.op, self.inputs, self.outputs) != (other.id, other.op, other.inputs, other.outputs):
            return False
        if dict(self.attrs) != dict(other.attrs) or set(self.weights) != set(other.weights):
            return False
        return all(tensors_identical(self.weights[k], other.weights[k]) for k in self.weights)

    __hash__ = None  # type: ignore[assignment]

    def replace(self, **changes: Any) -> NodeDef:
        return dataclasses.replace(self, **changes)

    def with_attrs(self, attrs: Mapping[str, Any]) -> NodeDef:
        return self.replace(attrs=dict(attrs))

    def with_weights(self, weights: Mapping[str, np.ndarray]) -> NodeDef:
        return self.replace(weights=dict(weights))

    def param_signature(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((role, self.weights[role].shape) for role in PARAM_ROLES if role in self.weights)


def tensors_identical(a: np.ndarray, b: np.ndarray) -> bool:
    """Bit-exact comparison including dtype and shape."""
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class GraphModel:
    name: str
    input: InputSpec
    output: str
    nodes: tuple[NodeDef, ...]
    preproc: PreprocessingConfig = field(default_factory=PreprocessingConfig)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def _index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def producers(self) -> dict[str, str]:
        """Value name -> id of the node producing it."""
        return {v: n.id for n in self.nodes for v in n.outputs}

    @cached_property
    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for n in self.nodes:
            for v in n.inputs:
                out.setdefault(v, []).append(n.id)
        return out

    @cached_property
    def execution_order(self) -> tuple[str, ...]:
        from .graph import topo_order

        return tuple(topo_order(self))

    def node(self, node_id: str) -> NodeDef:
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._index

    def position(self, node_id: str) -> int:
        return self._index[node_id]

    def node_ids(self) -> list[str]:
        return [n.id for n in self.nodes]

    def predecessors(self, node_id: str) -> list[str]:
        """Producer node ids of a node's inputs; ``ENTRY`` for the model input."""
        preds = []
        for v in self.node(node_id).inputs:
            p = ENTRY if v == self.input.name else self.producers.get(v)
            if p is not None and p not in preds:
                preds.append(p)
        return preds

    def successors(self, node_id: str) -> list[str]:
        if node_id == ENTRY:
            values: Iterable[str] = (self.input.name,)
        else:
            values = self.node(node_id).outputs
        succ: list[str] = []
        for v in values:
            for c in self.consumers.get(v, ()):
                if c not in succ:
                    succ.append(c)
        return sorted(succ, key=self.position)

    def replace(self, **changes: Any) -> GraphModel:
        return dataclasses.replace(self, **changes)

    def with_nodes(self, nodes: Iterable[NodeDef]) -> GraphModel:
        return self.replace(nodes=tuple(nodes))

    def with_node(self, node: NodeDef) -> GraphModel:
        """Copy with the node sharing ``node.id`` swapped for ``node``."""
        idx = self._index[node.id]
        nodes = list(self.nodes)
        nodes[idx] = node
        return self.with_nodes(nodes)


@dataclass(frozen=True)
class Subgraph:
    root_id: str
    dominator_id: str
    node_ids: tuple[str, ...]

    @property
    def interior(self) -> tuple[str, ...]:
        return tuple(n for n in self.node_ids if n not in (self.root_id, self.dominator_id))
