"""Seeded fault injection and the small reference classifier used to exercise it."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InjectionError
from .interpreter.dataset import Dataset
from .interpreter.preprocess import prepare_input
from .interpreter.runtime import execute
from .ir.graph import validate
from .ir.model import GraphModel, InputSpec, NodeDef, PreprocessingConfig
from .localizer.reports import MODEL_INPUT

CATEGORIES = ("PP", "ID", "TSS", "WB", "LH", "CG", "OUT_OF_TAXONOMY")

VARIANTS = {
    "PP": ("tf", "scale"),
    "ID": ("resize",),
    "TSS": ("bad-transpose",),
    "WB": ("noise", "quantize"),
    "LH": ("drop", "overwrite"),
    "CG": ("bn_split", "bn_split_equiv", "pad_fold"),
    "OUT_OF_TAXONOMY": ("activation-swap",),
}

# (default variant, default magnitude, default target layers)
DEFAULTS: dict[str, tuple[str, float, tuple[str, ...]]] = {
    "PP": ("tf", 1.0, ()),
    "ID": ("resize", 24.0, ()),
    "TSS": ("bad-transpose", 1.0, ()),
    "WB": ("noise", 0.5, ("conv2",)),
    "LH": ("drop", 1.0, ("conv1",)),
    "CG": ("bn_split", 0.5, ("bn1",)),
    "OUT_OF_TAXONOMY": ("activation-swap", 1.0, ()),
}
QUANTIZE_DEFAULT_BITS = 8.0

TF_PREPROC = PreprocessingConfig(1.0 / 127.5, (1.0, 1.0, 1.0), (1.0, 1.0, 1.0), "NCHW")
IMAGENET_PREPROC = PreprocessingConfig(1.0 / 255.0, (0.485, 0.456, 0.406), (0.229, 0.224, 0.225), "NCHW")


@dataclass(frozen=True)
class FaultSpec:
    category: str
    target_layers: tuple[str, ...] = ()
    magnitude: float | None = None
    seed: int = 0
    variant: str | None = None

    def __post_init__(self) -> None:
        if self.category not in CATEGORIES:
            raise InjectionError(f"unknown fault category {self.category!r}")
        object.__setattr__(self, "target_layers", tuple(self.target_layers))
        if self.variant is not None and self.variant not in VARIANTS[self.category]:
            raise InjectionError(f"{self.category} has no variant {self.variant!r}; "
                                 f"choose from {list(VARIANTS[self.category])}")
        if self.magnitude is not None and (not np.isfinite(self.magnitude) or self.magnitude < 0):
            raise InjectionError(f"magnitude must be finite and non-negative, got {self.magnitude}")

    def resolved(self) -> FaultSpec:
        variant, magnitude, layers = DEFAULTS[self.category]
        variant = self.variant or variant
        if self.magnitude is None and self.category == "WB" and variant == "quantize":
            magnitude = QUANTIZE_DEFAULT_BITS
        return FaultSpec(
            self.category,
            self.target_layers or layers,
            magnitude if self.magnitude is None else self.magnitude,
            self.seed,
            variant,
        )

    def to_dict(self) -> dict[str, Any]:
        return {"category": self.category, "target_layers": list(self.target_layers),
                "magnitude": self.magnitude, "seed": self.seed, "variant": self.variant}


@dataclass(frozen=True)
class InjectionRecord:
    spec: FaultSpec
    touched: tuple[str, ...]
    pre_digests: dict[str, str] = field(default_factory=dict)
    post_digests: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.touched:
            raise InjectionError("injection touched nothing")

    def to_dict(self) -> dict[str, Any]:
        return {"spec": self.spec.to_dict(), "touched": list(self.touched),
                "pre_digests": self.pre_digests, "post_digests": self.post_digests}


def _digest(model: GraphModel, location: str) -> str:
    h = hashlib.sha256()
    if location == MODEL_INPUT:
        h.update(json.dumps([model.input.name, list(model.input.shape), model.input.layout,
                             model.preproc.to_dict()]).encode())
    elif model.has_node(location):
        node = model.node(location)
        h.update(json.dumps([node.op, node.inputs, node.outputs,
                             {k: list(v) if isinstance(v, tuple) else v for k, v in node.attrs.items()}]).encode())
        for role, w in node.weights.items():
            h.update(role.encode())
            h.update(str(w.dtype).encode())
            h.update(np.asarray(w.shape, dtype=np.int64).tobytes())
            h.update(w.tobytes())
    else:
        return "absent"
    return h.hexdigest()


def _require_node(model: GraphModel, node_id: str, ops: tuple[str, ...] | None = None) -> NodeDef:
    if not model.has_node(node_id):
        raise InjectionError(f"no node {node_id!r} in {model.name}")
    node = model.node(node_id)
    if ops is not None and node.op not in ops:
        raise InjectionError(f"node {node_id} is {node.op}, expected one of {list(ops)}")
    return node


def _inject_pp(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    if spec.variant == "tf":
        cfg = PreprocessingConfig(TF_PREPROC.scale, TF_PREPROC.mean, TF_PREPROC.std, model.preproc.layout)
        if cfg == model.preproc:
            cfg = PreprocessingConfig(IMAGENET_PREPROC.scale, IMAGENET_PREPROC.mean, IMAGENET_PREPROC.std,
                                      model.preproc.layout)
    else:
        cfg = PreprocessingConfig(model.preproc.scale * (1.0 + spec.magnitude), model.preproc.mean,
                                  model.preproc.std, model.preproc.layout)
    return model.replace(preproc=cfg), [MODEL_INPUT]


def _inject_id(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    size = int(round(spec.magnitude))
    if size < 1:
        raise InjectionError("ID magnitude is the new spatial size and must be >= 1")
    shape = list(model.input.shape)
    if model.input.layout == "NHWC":
        shape[1] = shape[2] = size
    else:
        shape[2] = shape[3] = size
    return model.replace(input=InputSpec(model.input.name, shape, model.input.layout)), [MODEL_INPUT]


def _inject_tss(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    if model.input.layout != "NCHW" or len(model.input.shape) != 4:
        raise InjectionError("TSS injection needs a 4-D NCHW input")
    n, c, h, w = model.input.shape
    name = model.input.name
    t_id = "input_transpose"
    t_out = "input_transposed"
    if model.has_node(t_id) or t_out in model.producers:
        raise InjectionError("model already has an input transpose")
    # the correct conversion back to NCHW would be (0, 3, 1, 2)
    transpose = NodeDef(t_id, "Transpose", (name,), (t_out,), {"perm": (0, 3, 2, 1)})
    touched = [MODEL_INPUT, t_id]
    nodes = [transpose]
    for node in model.nodes:
        if name in node.inputs:
            node = node.replace(inputs=tuple(t_out if v == name else v for v in node.inputs))
            touched.append(node.id)
        nodes.append(node)
    preproc = PreprocessingConfig(model.preproc.scale, model.preproc.mean, model.preproc.std, "NHWC")
    out = model.replace(nodes=nodes, input=InputSpec(name, (n, h, w, c), "NHWC"), preproc=preproc)
    return out, touched


def _inject_wb(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    rng = np.random.default_rng(spec.seed)
    out = model
    for layer in spec.target_layers:
        node = _require_node(out, layer)
        if "weight" not in node.weights:
            raise InjectionError(f"node {layer} has no weights")
        weights = dict(node.weights)
        for role in ("weight", "bias"):
            if role not in weights:
                continue
            w = weights[role].astype(np.float64)
            if spec.variant == "noise":
                scale = float(w.std()) or 1.0
                w = w + rng.standard_normal(w.shape) * spec.magnitude * scale
            else:
                w = quantize_dequantize(w, spec.magnitude)
            weights[role] = w.astype(np.float32)
        out = out.with_node(node.with_weights(weights))
    return out, list(spec.target_layers)


def quantize_dequantize(w: np.ndarray, bits: float) -> np.ndarray:
    """Symmetric uniform quantization to ``bits`` bits and back; 0 bits is the identity."""
    if bits == 0:
        return w
    levels = 2.0 ** (int(bits) - 1) - 1
    if levels < 1:
        raise InjectionError("quantization needs at least 2 bits")
    peak = float(np.max(np.abs(w)))
    if peak == 0:
        return w
    step = peak / levels
    return np.round(w / step) * step


def _inject_lh(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    out = model
    for layer in spec.target_layers:
        node = _require_node(out, layer, ("Conv",))
        attrs = dict(node.attrs)
        if spec.variant == "drop":
            if "padding" not in attrs:
                raise InjectionError(f"{layer} has no padding to drop")
            del attrs["padding"]
        else:
            stride = 1 + int(round(spec.magnitude))
            attrs["strides"] = (stride, stride)
        out = out.with_node(node.with_attrs(attrs))
    return out, list(spec.target_layers)


def _inject_bn_split(model: GraphModel, spec: FaultSpec, corrupt: bool) -> tuple[GraphModel, list[str]]:
    (layer,) = spec.target_layers[:1] or ("bn1",)
    node = _require_node(model, layer, ("BatchNormalization",))
    w = {k: v.astype(np.float64) for k, v in node.weights.items()}
    eps = float(node.attrs.get("epsilon", 1e-5))
    mul = w["scale"] / np.sqrt(w["var"] + eps)
    add = w["bias"] - w["mean"] * mul
    if corrupt:
        rng = np.random.default_rng(spec.seed)
        mul = mul * (1.0 + spec.magnitude * rng.standard_normal(mul.shape))
    mid = f"{layer}_mul_out"
    mul_node = NodeDef(f"{layer}_mul", "Mul", node.inputs, (mid,), {"axis": 1},
                       {"scale": mul.astype(np.float32)})
    add_node = NodeDef(f"{layer}_add", "Add", (mid,), node.outputs, {"axis": 1},
                       {"bias": add.astype(np.float32)})
    nodes = []
    for n in model.nodes:
        if n.id == layer:
            nodes.extend([mul_node, add_node])
        else:
            nodes.append(n)
    return model.with_nodes(nodes), [layer, mul_node.id, add_node.id]


def _inject_pad_fold(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    pads = [n for n in model.nodes if n.op == "Pad"]
    if not pads:
        raise InjectionError("no Pad node to fold")
    pad = pads[0]
    consumers = model.consumers.get(pad.outputs[0], [])
    if len(consumers) != 1 or model.node(consumers[0]).op != "Conv":
        raise InjectionError(f"Pad {pad.id} does not feed a single Conv")
    conv = model.node(consumers[0])
    spec_vals = [int(v) for v in pad.weights["pads_spec"]]
    if len(spec_vals) != 8 or any(spec_vals[i] or spec_vals[i + 4] for i in (0, 1)):
        raise InjectionError("only spatial 4-D padding can be folded")
    top, left, bottom, right = spec_vals[2], spec_vals[3], spec_vals[6], spec_vals[7]
    old = conv.attrs.get("padding", (0, 0, 0, 0))
    padding = (old[0] + top, old[1] + left, old[2] + bottom, old[3] + right)
    new_conv = conv.replace(inputs=pad.inputs, attrs={**conv.attrs, "padding": padding})
    nodes = [new_conv if n.id == conv.id else n for n in model.nodes if n.id != pad.id]
    return model.with_nodes(nodes), [pad.id, conv.id]


def _inject_cg(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    if spec.variant == "pad_fold":
        return _inject_pad_fold(model, spec)
    return _inject_bn_split(model, spec, corrupt=spec.variant == "bn_split")


def _inject_activation_swap(model: GraphModel, spec: FaultSpec) -> tuple[GraphModel, list[str]]:
    order = model.execution_order
    convs = [i for i, nid in enumerate(order) if model.node(nid).op == "Conv"]
    start = convs[-1] + 1 if convs else 0
    relus = [nid for nid in order[start:] if model.node(nid).op == "Relu"]
    if not relus:
        raise InjectionError("no Relu after the last convolution")
    node = model.node(relus[0])
    # a Clip this wide is the identity: the activation is silently dropped
    swapped = node.replace(op="Clip", attrs={"min": -1e30, "max": 1e30})
    return model.with_node(swapped), [node.id]


_INJECTORS = {
    "PP": _inject_pp,
    "ID": _inject_id,
    "TSS": _inject_tss,
    "WB": _inject_wb,
    "LH": _inject_lh,
    "CG": _inject_cg,
    "OUT_OF_TAXONOMY": _inject_activation_swap,
}


def inject(source: GraphModel, spec: FaultSpec) -> tuple[GraphModel, InjectionRecord]:
    """Return a faulty copy of ``source`` and the ground truth of what changed.

    A magnitude of zero yields an unmodified model for every category.
    """
    problems = validate(source)
    if problems:
        raise InjectionError("source is invalid: " + "; ".join(problems))
    spec = spec.resolved()
    identity = spec.magnitude == 0 or (spec.category == "ID" and _same_size(source, spec.magnitude))
    if identity:
        touched = list(spec.target_layers) or [MODEL_INPUT]
        digests = {t: _digest(source, t) for t in touched}
        return source, InjectionRecord(spec, tuple(touched), digests, dict(digests))
    model, touched = _INJECTORS[spec.category](source, spec)
    problems = validate(model)
    if problems:
        raise InjectionError(f"{spec.category} injection produced an invalid model: " + "; ".join(problems))
    record = InjectionRecord(
        spec, tuple(touched),
        {t: _digest(source, t) for t in touched},
        {t: _digest(model, t) for t in touched},
    )
    return model.replace(name=f"{source.name}-{spec.category.lower()}"), record


def _same_size(model: GraphModel, magnitude: float) -> bool:
    return tuple(model.input.spatial) == (int(round(magnitude)),) * 2


# -- desk-scale reference model -----------------------------------------------

DESK_CLASSES = 10
DESK_SIZE = 16
MIN_MARGIN = 1e-4


def _desk_graph(rng: np.random.Generator) -> GraphModel:
    def he(shape, fan_in):
        return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    conv = {"strides": (1, 1), "dilations": (1, 1), "kernel_shape": (3, 3)}
    nodes = [
        NodeDef("conv1", "Conv", ("input",), ("conv1",), {**conv, "padding": (1, 1, 1, 1)},
                {"weight": he((8, 3, 3, 3), 27), "bias": (rng.standard_normal(8) * 0.1).astype(np.float32)}),
        NodeDef("bn1", "BatchNormalization", ("conv1",), ("bn1",), {"epsilon": 1e-5}, {
            "scale": rng.uniform(0.5, 1.5, 8).astype(np.float32),
            "bias": (rng.standard_normal(8) * 0.1).astype(np.float32),
            "mean": (rng.standard_normal(8) * 0.1).astype(np.float32),
            "var": rng.uniform(0.5, 2.0, 8).astype(np.float32),
        }),
        NodeDef("relu1", "Relu", ("bn1",), ("relu1",)),
        NodeDef("pad1", "Pad", ("relu1",), ("pad1",), {},
                {"pads_spec": np.array([0, 0, 1, 1, 0, 0, 1, 1], dtype=np.float32)}),
        NodeDef("conv2", "Conv", ("pad1",), ("conv2",), {**conv, "padding": (0, 0, 0, 0)},
                {"weight": he((16, 8, 3, 3), 72), "bias": (rng.standard_normal(16) * 0.1).astype(np.float32)}),
        NodeDef("relu2", "Relu", ("conv2",), ("relu2",)),
        NodeDef("pool", "GlobalAvgPool", ("relu2",), ("pool",)),
        NodeDef("flatten", "Flatten", ("pool",), ("flatten",)),
        NodeDef("fc", "Gemm", ("flatten",), ("fc",), {},
                {"weight": he((16, DESK_CLASSES), 16), "bias": np.zeros(DESK_CLASSES, dtype=np.float32)}),
        NodeDef("softmax", "Softmax", ("fc",), ("softmax",), {"axis": 1}),
    ]
    return GraphModel("desk", InputSpec("input", (1, 3, DESK_SIZE, DESK_SIZE), "NCHW"), "softmax",
                      nodes, IMAGENET_PREPROC)


def _synthetic_image(rng: np.random.Generator) -> np.ndarray:
    coarse = rng.uniform(0, 255, (4, 4, 3))
    smooth = np.kron(coarse, np.ones((DESK_SIZE // 4, DESK_SIZE // 4, 1)))
    brightness = rng.uniform(0.6, 1.4, 3)
    img = smooth * brightness + rng.normal(0, 20, (DESK_SIZE, DESK_SIZE, 3))
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def _pool_features(model: GraphModel, images: list[np.ndarray]) -> np.ndarray:
    feats = []
    for img in images:
        _, acts = execute(model, prepare_input(img, model), trace=True)
        feats.append(acts["flatten"].reshape(-1))
    return np.stack(feats).astype(np.float64)


def _margin(scores: np.ndarray) -> float:
    top = np.sort(scores.reshape(-1))[::-1]
    return float(top[0] - top[1])


def make_desk_model(seed: int = 0, n_images: int = 200) -> tuple[GraphModel, Dataset]:
    """Deterministic 10-class CNN plus ``n_images`` synthetic HWC uint8 images.

    The classifier head is calibrated on a held-out batch so that labels spread
    over the classes, and images whose top-2 score gap is below ``MIN_MARGIN``
    are redrawn.
    """
    rng = np.random.default_rng(seed)
    model = _desk_graph(rng)
    calib = [_synthetic_image(rng) for _ in range(64)]
    feats = _pool_features(model, calib)
    fc = model.node("fc")
    w = fc.weights["weight"].astype(np.float64) / (feats.std(axis=0)[:, None] + 1e-6)
    logits = (feats - feats.mean(axis=0)) @ w
    w *= 3.0 / (logits.std() + 1e-6)
    bias = -(feats.mean(axis=0) @ w)
    model = model.with_node(fc.with_weights({"weight": w.astype(np.float32), "bias": bias.astype(np.float32)}))

    ids, images, labels = [], [], {}
    for i in range(n_images):
        for _ in range(100):
            img = _synthetic_image(rng)
            scores, _ = execute(model, prepare_input(img, model))
            if _margin(scores) >= MIN_MARGIN:
                break
        image_id = f"img_{i:04d}"
        ids.append(image_id)
        images.append(img)
        labels[image_id] = int(np.argmax(scores))
    return model, Dataset(tuple(ids), tuple(images), labels)
