"""JSON manifest + raw weight blob persistence."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from ..errors import ModelFormatError, ValidationError
from .graph import validate
from .model import GraphModel, InputSpec, NodeDef, PreprocessingConfig

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_DTYPE_TAGS = {np.dtype(np.float32): "f32", np.dtype(np.uint8): "u8"}


def blob_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.stem + ".bin")


def _attr_to_json(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


def model_to_manifest(model: GraphModel) -> tuple[dict[str, Any], bytes]:
    """Serialise to (manifest dict, blob bytes) without touching the filesystem."""
    blob = bytearray()
    nodes = []
    for node in model.nodes:
        weights = {}
        for role in sorted(node.weights):
            tensor = node.weights[role]
            tag = _DTYPE_TAGS[tensor.dtype]
            raw = np.ascontiguousarray(tensor, dtype=_DTYPES[tag]).tobytes()
            entry: dict[str, Any] = {"offset": len(blob), "length": len(raw), "shape": list(tensor.shape)}
            if tag != "f32":
                entry["dtype"] = tag
            weights[role] = entry
            blob.extend(raw)
        nodes.append({
            "id": node.id,
            "op": node.op,
            "inputs": list(node.inputs),
            "outputs": list(node.outputs),
            "attrs": {k: _attr_to_json(v) for k, v in sorted(node.attrs.items())},
            "weights": weights,
        })
    manifest = {
        "name": model.name,
        "input": {"name": model.input.name, "shape": list(model.input.shape), "layout": model.input.layout},
        "output": model.output,
        "preproc": model.preproc.to_dict(),
        "nodes": nodes,
    }
    return manifest, bytes(blob)


def manifest_to_model(manifest: dict[str, Any], blob: bytes | None) -> GraphModel:
    try:
        inp = manifest["input"]
        nodes = []
        for raw_node in manifest["nodes"]:
            weights = {}
            for role, ref in raw_node.get("weights", {}).items():
                if blob is None:
                    raise ModelFormatError(f"blob unresolved for weight {role} of node {raw_node['id']}")
                weights[role] = _read_tensor(blob, ref, f"{raw_node['id']}.{role}")
            nodes.append(NodeDef(
                id=raw_node["id"],
                op=raw_node["op"],
                inputs=raw_node["inputs"],
                outputs=raw_node["outputs"],
                attrs=raw_node.get("attrs", {}),
                weights=weights,
            ))
        return GraphModel(
            name=manifest["name"],
            input=InputSpec(inp["name"], inp["shape"], inp.get("layout", "NCHW")),
            output=manifest["output"],
            nodes=nodes,
            preproc=PreprocessingConfig.from_dict(manifest["preproc"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc!r}") from exc


def _read_tensor(blob: bytes, ref: dict[str, Any], where: str) -> np.ndarray:
    offset, length, shape = int(ref["offset"]), int(ref["length"]), [int(d) for d in ref["shape"]]
    dtype = _DTYPES[ref.get("dtype", "f32")]
    if offset < 0 or length < 0 or offset + length > len(blob):
        raise ModelFormatError(f"blob range [{offset}, {offset + length}) out of bounds for {where}")
    if length != int(np.prod(shape)) * dtype.itemsize:
        raise ModelFormatError(f"blob length {length} does not match shape {shape} for {where}")
    data = np.frombuffer(blob, dtype=dtype, count=length // dtype.itemsize, offset=offset)
    return data.astype(dtype.newbyteorder("="), copy=True).reshape(shape)


def save_model(model: GraphModel, path: str | Path) -> None:
    """Write ``path`` (manifest) and its ``<stem>.bin`` weight blob."""
    violations = validate(model)
    if violations:
        raise ValidationError(violations)
    manifest, blob = model_to_manifest(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    blob_path(path).write_bytes(blob)


def load_model(path: str | Path) -> GraphModel:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"malformed manifest {path}: {exc}") from exc
    except OSError as exc:
        raise ModelFormatError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(manifest, dict):
        raise ModelFormatError(f"malformed manifest {path}: top level must be an object")
    bpath = blob_path(path)
    blob = bpath.read_bytes() if bpath.exists() else None
    has_weights = any(n.get("weights") for n in manifest.get("nodes", []) if isinstance(n, dict))
    if blob is None and has_weights:
        raise ModelFormatError(f"blob unresolved: {bpath} not found")
    model = manifest_to_model(manifest, blob)
    violations = validate(model)
    if violations:
        raise ValidationError(violations)
    return model
