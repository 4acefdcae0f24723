"""Repair strategies producing candidate Target models, and their acceptance tests.

Every strategy is copy-on-write: the model passed in is never modified and
each returned candidate has been validated and shape-checked.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import FixconError, RepairError
from .interpreter.preprocess import prepare_input
from .interpreter.runtime import LabelRanking, infer, infer_shapes
from .ir.graph import validate
from .ir.model import ENTRY, PARAM_ROLES, GraphModel, InputSpec, NodeDef, PreprocessingConfig, Subgraph
from .localizer.detectors import check_tensor_structure, input_prefix
from .localizer.reports import MODEL_INPUT, Category, FaultReport, LayerPair, Location, to_jsonable
from .stats import kendall_tau

KT_FIXED_THRESHOLD = 0.99
FIX_PREFIX = "fix_"

# Axis permutations between the two supported layouts, indexed (from, to).
_LAYOUT_PERMS = {("NHWC", "NCHW"): (0, 3, 1, 2), ("NCHW", "NHWC"): (0, 2, 3, 1)}


@dataclass
class RepairAction:
    strategy: Category
    target_location: Location
    description: str
    accepted: bool
    kt_before: float | None
    kt_after: float | None
    iteration: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "strategy": self.strategy.value,
            "target_location": to_jsonable(self.target_location),
            "description": self.description,
            "accepted": self.accepted,
            "kt_before": self.kt_before,
            "kt_after": self.kt_after,
        }


@dataclass
class CandidateModel:
    model: GraphModel
    strategy: Category
    location: Location
    description: str
    provenance: list[RepairAction] = field(default_factory=list)


def checked(model: GraphModel) -> GraphModel:
    """Validate and statically shape-check a rewritten model."""
    violations = validate(model)
    if violations:
        raise RepairError("candidate fails validation: " + "; ".join(violations))
    try:
        infer_shapes(model)
    except FixconError as exc:
        raise RepairError(f"candidate fails shape check: {exc}") from exc
    return model


def _unique(name: str, taken: set[str]) -> str:
    if name not in taken:
        return name
    for i in itertools.count(1):
        cand = f"{name}_{i}"
        if cand not in taken:
            return cand
    raise AssertionError("unreachable")


# -- input-based strategies ---------------------------------------------------

def repair_preprocessing(target: GraphModel, candidates: Sequence[PreprocessingConfig]) -> list[CandidateModel]:
    out: list[CandidateModel] = []
    seen: list[PreprocessingConfig] = []
    for cfg in candidates:
        if cfg in seen:
            continue
        seen.append(cfg)
        out.append(CandidateModel(target.replace(preproc=cfg), Category.PP, MODEL_INPUT,
                                  f"run Target with preprocessing {cfg.to_dict()}"))
    return out


def repair_input_dims(target: GraphModel, source: GraphModel) -> CandidateModel:
    if target.input.shape == source.input.shape:
        return CandidateModel(target, Category.ID, MODEL_INPUT, "input dimensions already match")
    spec = InputSpec(target.input.name, source.input.shape, source.input.layout)
    model = checked(target.replace(input=spec))
    return CandidateModel(model, Category.ID, MODEL_INPUT,
                          f"set input shape {list(target.input.shape)} -> {list(source.input.shape)}")


def derive_perm(from_shape: Sequence[int], to_shape: Sequence[int]) -> tuple[int, ...]:
    """Axis permutation taking ``from_shape`` to ``to_shape``.

    Equal-sized dims make several permutations fit; the canonical layout
    conversion wins when it is among them, otherwise the choice is ambiguous.
    """
    from_shape, to_shape = tuple(from_shape), tuple(to_shape)
    fits = [p for p in itertools.permutations(range(len(from_shape)))
            if tuple(from_shape[i] for i in p) == to_shape]
    if not fits:
        raise RepairError(f"no permutation maps {list(from_shape)} to {list(to_shape)}")
    if len(fits) == 1:
        return fits[0]
    for perm in _LAYOUT_PERMS.values():
        if perm in fits:
            return perm
    raise RepairError(f"ambiguous permutation from {list(from_shape)} to {list(to_shape)}: "
                      f"{[list(p) for p in fits]}")


def _remove_input_transpose(target: GraphModel, source: GraphModel, report: FaultReport) -> tuple[GraphModel, str]:
    t_id = report.detail["transpose"]
    t_node = target.node(t_id)
    upstream = set(input_prefix(target)) - {t_id}
    # nodes of the prefix feeding the transpose keep working on the raw input
    before = [n for n in upstream if _reaches(target, n, t_id)]
    layouts = (target.input.layout, source.input.layout)
    axis_perm = _LAYOUT_PERMS.get(layouts)
    if axis_perm is None:
        axis_perm = tuple(t_node.attrs.get("perm", ())) or None
    src_val, dst_val = t_node.inputs[0], t_node.outputs[0]
    nodes = []
    adjusted = []
    for node in target.nodes:
        if node.id == t_id:
            continue
        if dst_val in node.inputs:
            node = node.replace(inputs=tuple(src_val if v == dst_val else v for v in node.inputs))
        if node.id in before and "axis" in node.attrs and axis_perm is not None:
            axis = node.attrs["axis"] % len(axis_perm)
            new_axis = axis_perm.index(axis)
            if new_axis != node.attrs["axis"]:
                node = node.with_attrs({**node.attrs, "axis": new_axis})
                adjusted.append(node.id)
        elif node.id in before and node.op in ("Add", "Mul") and "axis" not in node.attrs and axis_perm:
            # default channel axis 1 referred to the old layout
            new_axis = axis_perm.index(1) if 1 in axis_perm else 1
            if new_axis != 1:
                node = node.with_attrs({**node.attrs, "axis": new_axis})
                adjusted.append(node.id)
        nodes.append(node)
    output = src_val if target.output == dst_val else target.output
    model = target.replace(
        nodes=nodes,
        output=output,
        input=InputSpec(target.input.name, source.input.shape, source.input.layout),
        preproc=PreprocessingConfig(target.preproc.scale, target.preproc.mean, target.preproc.std,
                                    source.preproc.layout),
    )
    desc = f"remove input Transpose {t_id}, set input shape {list(source.input.shape)}"
    if adjusted:
        desc += f", adjust axis of {adjusted}"
    return model, desc


def _reaches(model: GraphModel, start: str, goal: str) -> bool:
    stack, seen = [start], set()
    while stack:
        cur = stack.pop()
        if cur == goal:
            return True
        if cur in seen:
            continue
        seen.add(cur)
        stack.extend(model.successors(cur))
    return False


def _insert_transpose(target: GraphModel, report: FaultReport) -> tuple[GraphModel, str]:
    _, flat_id = report.location
    perm = derive_perm(report.detail["target_shape"], report.detail["source_shape"])
    flat = target.node(flat_id)
    taken_ids = set(target.node_ids())
    taken_vals = set(target.producers) | {target.input.name}
    new_id = _unique(f"{FIX_PREFIX}transpose_{flat_id}", taken_ids)
    new_val = _unique(f"{FIX_PREFIX}{flat.inputs[0]}_t", taken_vals)
    transpose = NodeDef(new_id, "Transpose", (flat.inputs[0],), (new_val,), {"perm": perm})
    nodes = []
    for node in target.nodes:
        if node.id == flat_id:
            nodes.append(transpose)
            node = node.replace(inputs=(new_val,) + node.inputs[1:])
        nodes.append(node)
    return target.with_nodes(nodes), f"insert Transpose{list(perm)} before {flat_id}"


def repair_tensor_structure(target: GraphModel, source: GraphModel,
                            reports: Sequence[FaultReport] | None = None) -> CandidateModel:
    if reports is None:
        reports = check_tensor_structure(source, target)
    reports = [r for r in reports if r.category == Category.TSS]
    if not reports:
        return CandidateModel(target, Category.TSS, MODEL_INPUT, "no tensor structure fault")
    model = target
    descriptions = []
    for report in reports:
        if report.detail["case"] == "input-transpose":
            model, desc = _remove_input_transpose(model, source, report)
        else:
            model, desc = _insert_transpose(model, report)
        descriptions.append(desc)
    return CandidateModel(checked(model), Category.TSS, reports[0].location, "; ".join(descriptions))


# -- layer-based strategies ---------------------------------------------------

def repair_weights(target: GraphModel, source: GraphModel, layer_pair: LayerPair) -> CandidateModel:
    s_id, t_id = layer_pair
    snode, tnode = source.node(s_id), target.node(t_id)
    for role in PARAM_ROLES:
        a, b = snode.weights.get(role), tnode.weights.get(role)
        if a is not None and b is not None and a.shape != b.shape:
            raise RepairError(f"{role} of {t_id} has shape {list(b.shape)}, Source has {list(a.shape)}; "
                              "needs a graph-level (CG) repair")
    weights = {r: w for r, w in tnode.weights.items() if r not in PARAM_ROLES}
    weights.update({r: w for r, w in snode.weights.items() if r in PARAM_ROLES})
    model = checked(target.with_node(tnode.with_weights(weights)))
    roles = sorted(r for r in weights if r in PARAM_ROLES)
    return CandidateModel(model, Category.WB, layer_pair, f"copy {roles} of {s_id} into {t_id}")


def repair_hyperparams(target: GraphModel, source: GraphModel, layer_pair: LayerPair,
                       lh_reports: Sequence[FaultReport]) -> CandidateModel:
    s_id, t_id = layer_pair
    attrs = dict(target.node(t_id).attrs)
    src_attrs = source.node(s_id).attrs
    changes = []
    for report in lh_reports:
        if report.category != Category.LH or report.location != layer_pair:
            continue
        name, kind = report.detail["attr"], report.detail["kind"]
        if kind == "extra-in-target":
            attrs.pop(name, None)
            changes.append(f"remove {name}")
        else:
            attrs[name] = src_attrs[name]
            changes.append(f"set {name}={list(src_attrs[name]) if isinstance(src_attrs[name], tuple) else src_attrs[name]}")
    model = checked(target.with_node(target.node(t_id).with_attrs(attrs)))
    return CandidateModel(model, Category.LH, layer_pair, f"{t_id}: " + ", ".join(changes))


def repair_subgraph(target: GraphModel, source: GraphModel, cg_report: FaultReport) -> CandidateModel:
    """Splice the Source subgraph between a layer and its dominating layer into Target."""
    s_sub: Subgraph = cg_report.detail["source_subgraph"]
    t_sub: Subgraph = cg_report.detail["target_subgraph"]
    if cg_report.detail["divergence"].get("reason") == "dominating layers differ":
        raise RepairError("subgraph boundaries do not correspond")
    for nid in t_sub.node_ids:
        if nid != ENTRY and not target.has_node(nid):
            raise RepairError(f"target node {nid} no longer exists")
    s_root, t_root = source.node(s_sub.root_id), target.node(t_sub.root_id)
    if len(s_root.inputs) != len(t_root.inputs):
        raise RepairError(f"boundary arity mismatch at {t_root.id}: "
                          f"{len(s_root.inputs)} vs {len(t_root.inputs)} inputs")

    def dom_outputs(model: GraphModel, dom: str) -> tuple[str, ...]:
        return (model.input.name,) if dom == ENTRY else model.node(dom).outputs

    s_dom_out, t_dom_out = dom_outputs(source, s_sub.dominator_id), dom_outputs(target, t_sub.dominator_id)
    if len(s_dom_out) != len(t_dom_out):
        raise RepairError("boundary arity mismatch at the dominating layer")

    t_interior = set(t_sub.interior)
    for nid in t_interior:
        for v in target.node(nid).outputs:
            outside = [c for c in target.consumers.get(v, ()) if c not in t_interior and c != t_root.id]
            if outside or v == target.output:
                raise RepairError(f"value {v} of {nid} escapes the subgraph")

    rename = dict(zip(s_dom_out, t_dom_out))
    taken_ids = set(target.node_ids()) - t_interior
    taken_vals = ({target.input.name} | set(target.producers)) - {
        v for nid in t_interior for v in target.node(nid).outputs}
    new_nodes = []
    for sid in s_sub.interior:
        snode = source.node(sid)
        for v in snode.outputs:
            rename[v] = _unique(FIX_PREFIX + v, taken_vals)
            taken_vals.add(rename[v])
    for sid in s_sub.interior:
        snode = source.node(sid)
        missing = [v for v in snode.inputs if v not in rename]
        if missing:
            raise RepairError(f"boundary arity mismatch: {sid} reads {missing} from outside the subgraph")
        new_id = _unique(FIX_PREFIX + sid, taken_ids)
        taken_ids.add(new_id)
        new_nodes.append(snode.replace(
            id=new_id,
            inputs=tuple(rename[v] for v in snode.inputs),
            outputs=tuple(rename[v] for v in snode.outputs),
        ))
    try:
        root_inputs = tuple(rename[v] for v in s_root.inputs)
    except KeyError as exc:
        raise RepairError(f"boundary arity mismatch: root input {exc} not produced in the subgraph") from None
    new_root = t_root.replace(inputs=root_inputs, attrs=dict(s_root.attrs), weights=dict(s_root.weights))

    nodes: list[NodeDef] = []
    inserted = False
    for node in target.nodes:
        if node.id in t_interior or node.id == t_root.id:
            if not inserted:
                nodes.extend(new_nodes)
                inserted = True
            if node.id == t_root.id:
                nodes.append(new_root)
            continue
        nodes.append(node)
    model = checked(target.with_nodes(nodes))
    desc = (f"replace {list(t_sub.interior)} before {t_root.id} with Source nodes "
            f"{[n.id for n in new_nodes]}")
    return CandidateModel(model, Category.CG, cg_report.location, desc)


def apply_strategy(strategy: Category, target: GraphModel, source: GraphModel, layer_pair: LayerPair,
                   reports: Sequence[FaultReport]) -> CandidateModel:
    if strategy == Category.WB:
        return repair_weights(target, source, layer_pair)
    if strategy == Category.LH:
        return repair_hyperparams(target, source, layer_pair, reports)
    if strategy == Category.CG:
        return repair_subgraph(target, source, reports[0])
    raise ValueError(f"{strategy} is not a layer-based strategy")


# -- acceptance -----------------------------------------------------------------

def ranking_for(model: GraphModel, image: np.ndarray) -> LabelRanking | None:
    """Label ranking of ``image`` under ``model``; ``None`` when the model cannot run it."""
    try:
        return infer(model, prepare_input(image, model))
    except FixconError:
        return None


def image_tau(candidate: GraphModel, source: GraphModel | LabelRanking, image: np.ndarray) -> float | None:
    src = source if isinstance(source, LabelRanking) else ranking_for(source, image)
    cand = ranking_for(candidate, image)
    if src is None or cand is None:
        return None
    return kendall_tau(src, cand)


def is_kt_improved(candidate: GraphModel, incumbent: GraphModel, source: GraphModel | LabelRanking,
                   driving_image: np.ndarray) -> bool:
    after = image_tau(candidate, source, driving_image)
    if after is None:
        return False
    before = image_tau(incumbent, source, driving_image)
    return before is None or after > before


def is_fixed(candidate: GraphModel, source: GraphModel | LabelRanking, driving_image: np.ndarray,
             threshold: float = KT_FIXED_THRESHOLD) -> bool:
    tau = image_tau(candidate, source, driving_image)
    return tau is not None and tau >= threshold
