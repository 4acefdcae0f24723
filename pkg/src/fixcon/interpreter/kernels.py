"""Reference operator kernels.

Every kernel maps ``(node, inputs)`` to one float32 array. Tensors are
batch-first; convolution and pooling assume NCHW.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ShapeError, UnknownOpError
from ..ir.model import NodeDef

F32 = np.float32
Kernel = Callable[[NodeDef, list[np.ndarray]], np.ndarray]

KERNELS: dict[str, Kernel] = {}


def kernel(op: str) -> Callable[[Kernel], Kernel]:
    def register(fn: Kernel) -> Kernel:
        KERNELS[op] = fn
        return fn
    return register


def run_kernel(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    fn = KERNELS.get(node.op)
    if fn is None:
        raise UnknownOpError(f"unknown op {node.op} at node {node.id}")
    try:
        out = fn(node, inputs)
    except ShapeError:
        raise
    except (ValueError, IndexError) as exc:
        raise ShapeError(node.id, str(exc)) from exc
    return np.asarray(out, dtype=F32)


def _ints(values: np.ndarray | tuple[int, ...]) -> tuple[int, ...]:
    arr = np.asarray(values).reshape(-1)
    if not np.all(arr == np.round(arr)):
        raise ValueError(f"expected integral values, got {arr.tolist()}")
    return tuple(int(v) for v in arr)


def _channel_view(vec: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = vec.size
    return vec.reshape(shape)


def _broadcast_operand(node: NodeDef, x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Scalar, same-shape, or per-channel vector along ``axis`` (default 1)."""
    if c.size == 1:
        return c.reshape(())
    if c.shape == x.shape:
        return c
    axis = int(node.attrs.get("axis", 1))
    axis = axis + x.ndim if axis < 0 else axis
    if not 0 <= axis < x.ndim:
        raise ShapeError(node.id, f"axis {axis} out of range for rank {x.ndim}")
    if c.size == x.shape[axis]:
        return _channel_view(c.reshape(-1), x.ndim, axis)
    raise ShapeError(node.id, f"cannot broadcast operand {list(c.shape)} onto {list(x.shape)} along axis {axis}")


@kernel("Conv")
def conv2d(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    w = node.weights["weight"]
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(node.id, f"Conv expects 4-D input and weight, got {list(x.shape)} / {list(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(node.id, f"input channels {x.shape[1]} != weight channels {w.shape[1]}")
    kh, kw = w.shape[2:]
    ks = node.attrs.get("kernel_shape")
    if ks is not None and tuple(ks) != (kh, kw):
        raise ShapeError(node.id, f"kernel_shape {list(ks)} disagrees with weight {list(w.shape)}")
    sh, sw = node.attrs.get("strides", (1, 1))
    dh, dw = node.attrs.get("dilations", (1, 1))
    top, left, bottom, right = node.attrs.get("padding", (0, 0, 0, 0))
    xp = np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))
    oh = (xp.shape[2] - dh * (kh - 1) - 1) // sh + 1
    ow = (xp.shape[3] - dw * (kw - 1) - 1) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(node.id, f"kernel {kh}x{kw} does not fit input {list(x.shape)}")
    out = np.zeros((x.shape[0], w.shape[0], oh, ow), dtype=F32)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dh, j * dw
            patch = xp[:, :, r0:r0 + sh * (oh - 1) + 1:sh, c0:c0 + sw * (ow - 1) + 1:sw]
            out += np.einsum("nihw,oi->nohw", patch, w[:, :, i, j])
    if "bias" in node.weights:
        b = node.weights["bias"].reshape(-1)
        if b.size != w.shape[0]:
            raise ShapeError(node.id, f"bias length {b.size} != output channels {w.shape[0]}")
        out += b.reshape(1, -1, 1, 1)
    return out


@kernel("BatchNormalization")
def batch_norm(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    eps = F32(node.attrs.get("epsilon", 1e-5))
    params = [node.weights[r].reshape(-1) for r in ("scale", "bias", "mean", "var")]
    if x.ndim < 2 or any(p.size != x.shape[1] for p in params):
        raise ShapeError(node.id, f"BatchNormalization parameters do not match channels of {list(x.shape)}")
    scale, bias, mean, var = (_channel_view(p, x.ndim, 1) for p in params)
    return (x - mean) / np.sqrt(var + eps) * scale + bias


@kernel("Pad")
def pad(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    pads = _ints(node.weights["pads_spec"])
    if len(pads) != 2 * x.ndim or min(pads) < 0:
        raise ShapeError(node.id, f"pads {list(pads)} invalid for rank {x.ndim}")
    widths = [(pads[i], pads[i + x.ndim]) for i in range(x.ndim)]
    return np.pad(x, widths)


def transpose_perm(node: NodeDef, ndim: int) -> tuple[int, ...]:
    if "perm" in node.attrs:
        return tuple(node.attrs["perm"])
    if "perm" in node.weights:
        return _ints(node.weights["perm"])
    return tuple(reversed(range(ndim)))


@kernel("Transpose")
def transpose(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    perm = transpose_perm(node, x.ndim)
    if sorted(perm) != list(range(x.ndim)):
        raise ShapeError(node.id, f"perm {list(perm)} invalid for rank {x.ndim}")
    return np.ascontiguousarray(np.transpose(x, perm))


@kernel("Flatten")
def flatten(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    return x.reshape(x.shape[0], -1)


@kernel("Reshape")
def reshape(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    return x.reshape(_ints(node.weights["target_shape"]))


@kernel("Add")
def add(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    x = inputs[0]
    other = inputs[1] if len(inputs) == 2 else node.weights.get("bias")
    if other is None:
        raise ShapeError(node.id, "Add needs a second input or a bias constant")
    return x + _broadcast_operand(node, x, other)


@kernel("Mul")
def mul(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    x = inputs[0]
    other = inputs[1] if len(inputs) == 2 else node.weights.get("scale")
    if other is None:
        raise ShapeError(node.id, "Mul needs a second input or a scale constant")
    return x * _broadcast_operand(node, x, other)


@kernel("Gather")
def gather(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    indices = np.asarray(_ints(node.weights["indices"]), dtype=np.int64)
    return np.take(x, indices, axis=int(node.attrs.get("axis", 0)))


@kernel("Unsqueeze")
def unsqueeze(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    return np.expand_dims(x, int(node.attrs.get("axis", 0)))


@kernel("Clip")
def clip(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    lo = F32(node.attrs.get("min", -np.inf))
    hi = F32(node.attrs.get("max", np.inf))
    return np.clip(x, lo, hi)


@kernel("Relu")
def relu(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    return np.maximum(x, F32(0))


@kernel("GlobalAvgPool")
def global_avg_pool(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    if x.ndim < 3:
        raise ShapeError(node.id, f"GlobalAvgPool expects spatial dims, got {list(x.shape)}")
    return x.mean(axis=tuple(range(2, x.ndim)), keepdims=True, dtype=F32)


@kernel("Gemm")
def gemm(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    w = node.weights["weight"]
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(node.id, f"Gemm cannot multiply {list(x.shape)} by {list(w.shape)}")
    y = x @ w
    if "bias" in node.weights:
        b = node.weights["bias"].reshape(-1)
        if b.size != w.shape[1]:
            raise ShapeError(node.id, f"bias length {b.size} != {w.shape[1]}")
        y = y + b
    return y


@kernel("Softmax")
def softmax(node: NodeDef, inputs: list[np.ndarray]) -> np.ndarray:
    (x,) = inputs
    axis = int(node.attrs.get("axis", -1))
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)
