"""Model execution, activation tracing and label rankings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..ir.model import ENTRY, GraphModel
from .kernels import F32, run_kernel


@dataclass(frozen=True)
class LabelRanking:
    """Class indices sorted by descending score, ties by ascending index."""

    order: tuple[int, ...]
    scores: tuple[float, ...]

    @classmethod
    def from_scores(cls, scores: np.ndarray) -> LabelRanking:
        s = np.asarray(scores, dtype=F32).reshape(-1)
        idx = np.arange(s.size)
        order = np.lexsort((idx, -s))
        return cls(tuple(int(i) for i in order), tuple(float(s[i]) for i in order))

    @property
    def top1(self) -> int:
        return self.order[0]

    def __len__(self) -> int:
        return len(self.order)


@dataclass
class ActivationTrace:
    activations: dict[str, np.ndarray]
    final_scores: np.ndarray

    def __len__(self) -> int:
        return len(self.activations)


def execute(model: GraphModel, x: np.ndarray, trace: bool = False) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Run ``model`` on a prepared input tensor.

    Returns the output tensor and, when ``trace`` is set, every node's output.
    """
    x = np.asarray(x, dtype=F32)
    if tuple(x.shape) != model.input.shape:
        raise ShapeError(ENTRY, f"input shape {list(x.shape)} != model input {list(model.input.shape)}")
    values: dict[str, np.ndarray] = {model.input.name: x}
    recorded: dict[str, np.ndarray] = {}
    for nid in model.execution_order:
        node = model.node(nid)
        out = run_kernel(node, [values[v] for v in node.inputs])
        values[node.outputs[0]] = out
        if trace:
            recorded[nid] = out
    return values[model.output], recorded


def infer(model: GraphModel, x: np.ndarray) -> LabelRanking:
    out, _ = execute(model, x)
    return LabelRanking.from_scores(out)


def infer_traced(model: GraphModel, x: np.ndarray) -> ActivationTrace:
    out, recorded = execute(model, x, trace=True)
    return ActivationTrace(recorded, out.reshape(-1).copy())


def infer_shapes(model: GraphModel) -> dict[str, tuple[int, ...]]:
    """Static output shape of every node, found by running on a zero input."""
    _, recorded = execute(model, np.zeros(model.input.shape, dtype=F32), trace=True)
    return {nid: tuple(a.shape) for nid, a in recorded.items()}
