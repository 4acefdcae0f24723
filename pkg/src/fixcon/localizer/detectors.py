"""Static comparisons between Source and Target for the six fault categories."""

from __future__ import annotations

from collections import deque

import numpy as np

from ..errors import FixconError
from ..interpreter.runtime import infer_shapes
from ..ir.graph import dominator_tree, dominators_of, subgraph_between
from ..ir.model import ENTRY, PARAM_ROLES, GraphModel, PreprocessingConfig, Subgraph
from .matching import LAYER_OPS, LayerMatching
from .reports import MODEL_INPUT, Category, FaultReport, LayerPair

RESHAPING_OPS = frozenset({"Flatten", "Reshape"})
# Ops that end the input-processing prefix of a graph.
_COMPUTE_OPS = frozenset({"Conv", "Gemm"})


def check_preprocessing(source: GraphModel, target: GraphModel) -> tuple[list[PreprocessingConfig], FaultReport | None]:
    """Candidate configs to trial on Target, plus a PP report when they differ."""
    src, tgt = source.preproc, target.preproc
    if src == tgt:
        return [], None
    fields = [f for f in ("scale", "mean", "std", "layout") if getattr(src, f) != getattr(tgt, f)]
    report = FaultReport(Category.PP, MODEL_INPUT, {
        "fields": fields,
        "source": src.to_dict(),
        "target": tgt.to_dict(),
    })
    return [src, tgt], report


def check_input_dims(source: GraphModel, target: GraphModel) -> FaultReport | None:
    s, t = source.input.shape, target.input.shape
    if s == t:
        return None
    return FaultReport(Category.ID, MODEL_INPUT, {
        "source_shape": list(s),
        "target_shape": list(t),
        "layout_flavored": sorted(s) == sorted(t),
    })


def input_prefix(model: GraphModel) -> list[str]:
    """Nodes between the model input and the first Conv/Gemm, in BFS order."""
    order: list[str] = []
    queue = deque(model.successors(ENTRY))
    seen = set(queue)
    while queue:
        nid = queue.popleft()
        if model.node(nid).op in _COMPUTE_OPS:
            continue
        order.append(nid)
        for s in model.successors(nid):
            if s not in seen:
                seen.add(s)
                queue.append(s)
    return order


def _safe_shapes(model: GraphModel) -> dict[str, tuple[int, ...]] | None:
    try:
        return infer_shapes(model)
    except FixconError:
        return None


def _reshaping_nodes(model: GraphModel) -> list[str]:
    return [nid for nid in model.execution_order if model.node(nid).op in RESHAPING_OPS]


def check_tensor_structure(source: GraphModel, target: GraphModel) -> list[FaultReport]:
    reports: list[FaultReport] = []
    if source.input.shape != target.input.shape:
        prefix = input_prefix(target)
        transposes = [nid for nid in prefix if target.node(nid).op == "Transpose"]
        if transposes:
            reports.append(FaultReport(Category.TSS, MODEL_INPUT, {
                "case": "input-transpose",
                "transpose": transposes[0],
                "prefix": prefix,
                "source_shape": list(source.input.shape),
                "target_shape": list(target.input.shape),
            }))

    src_flat, tgt_flat = _reshaping_nodes(source), _reshaping_nodes(target)
    if not src_flat or not tgt_flat:
        return reports
    src_shapes, tgt_shapes = _safe_shapes(source), _safe_shapes(target)
    if src_shapes is None or tgt_shapes is None:
        return reports
    src_idom, tgt_idom = dominator_tree(source), dominator_tree(target)
    for s_id, t_id in zip(src_flat, tgt_flat):
        if source.node(s_id).op != target.node(t_id).op:
            continue
        s_dom, t_dom = src_idom.get(s_id), tgt_idom.get(t_id)
        if s_dom is None or t_dom is None:
            continue
        s_shape = source.input.shape if s_dom == ENTRY else src_shapes[s_dom]
        t_shape = target.input.shape if t_dom == ENTRY else tgt_shapes[t_dom]
        if s_shape != t_shape and np.prod(s_shape) == np.prod(t_shape):
            reports.append(FaultReport(Category.TSS, (s_id, t_id), {
                "case": "pre-flatten",
                "source_dominator": s_dom,
                "target_dominator": t_dom,
                "source_shape": list(s_shape),
                "target_shape": list(t_shape),
            }))
    return reports


def compare_weights(source: GraphModel, target: GraphModel, matching: LayerMatching,
                    tolerance: float = 0.0) -> list[FaultReport]:
    """One WB report per matched node whose parameters differ beyond ``tolerance``."""
    reports = []
    for s_id, t_id in matching.pairs:
        snode, tnode = source.node(s_id), target.node(t_id)
        roles = [r for r in PARAM_ROLES if r in snode.weights or r in tnode.weights]
        if not roles:
            continue
        per_role: dict[str, int] = {}
        shape_mismatch: list[str] = []
        max_diff = 0.0
        for role in roles:
            a, b = snode.weights.get(role), tnode.weights.get(role)
            if a is None or b is None or a.shape != b.shape:
                shape_mismatch.append(role)
                continue
            diff = np.abs(a.astype(np.float64).ravel() - b.astype(np.float64).ravel())
            bad = ~(diff <= tolerance)
            if bad.any():
                per_role[role] = int(bad.sum())
                max_diff = max(max_diff, float(np.nanmax(np.where(np.isnan(diff), np.inf, diff))))
        if per_role or shape_mismatch:
            detail = {
                "mismatched_elements": sum(per_role.values()),
                "max_abs_diff": max_diff,
                "roles": per_role,
            }
            if shape_mismatch:
                detail["shape"] = shape_mismatch
            reports.append(FaultReport(Category.WB, (s_id, t_id), detail))
    return reports


def compare_hyperparams(source: GraphModel, target: GraphModel, matching: LayerMatching) -> list[FaultReport]:
    reports = []
    for s_id, t_id in matching.pairs:
        sa, ta = source.node(s_id).attrs, target.node(t_id).attrs
        for name in sorted(set(sa) | set(ta)):
            if name not in ta:
                kind = "missing-in-target"
            elif name not in sa:
                kind = "extra-in-target"
            elif sa[name] != ta[name]:
                kind = "value-mismatch"
            else:
                continue
            reports.append(FaultReport(Category.LH, (s_id, t_id), {
                "attr": name,
                "kind": kind,
                "source_value": sa.get(name),
                "target_value": ta.get(name),
            }))
    return reports


def dominating_layer(model: GraphModel, node_id: str, idom: dict[str, str] | None = None) -> str:
    """Nearest strict dominator that is a convolutional layer, else ``ENTRY``."""
    for dom in dominators_of(model, node_id, idom):
        if dom == ENTRY or model.node(dom).op in LAYER_OPS:
            return dom
    return ENTRY


def layer_subgraph(model: GraphModel, node_id: str, idom: dict[str, str] | None = None) -> Subgraph:
    return subgraph_between(model, node_id, dominating_layer(model, node_id, idom))


def _signature(model: GraphModel, nid: str, with_attrs: bool) -> tuple:
    if nid == ENTRY:
        return (ENTRY,)
    node = model.node(nid)
    if with_attrs:
        return (node.op, tuple(sorted(node.attrs.items())))
    return (node.op,)


def compare_graph(source: GraphModel, target: GraphModel, layer_pair: LayerPair,
                  matching: LayerMatching) -> list[FaultReport]:
    """BFS comparison of the subgraphs bounded by each layer and its dominating layer.

    Endpoints are compared by op only (their attributes belong to LH);
    interior nodes by op and attributes.
    """
    s_id, t_id = layer_pair
    s_sub = layer_subgraph(source, s_id)
    t_sub = layer_subgraph(target, t_id)
    divergence = None
    s_dom, t_dom = s_sub.dominator_id, t_sub.dominator_id
    if (s_dom == ENTRY) != (t_dom == ENTRY) or (s_dom != ENTRY and matching.target_of(s_dom) != t_dom):
        divergence = {"reason": "dominating layers differ", "source": s_dom, "target": t_dom}
    else:
        endpoints_s = {s_sub.root_id, s_sub.dominator_id}
        for i in range(max(len(s_sub.node_ids), len(t_sub.node_ids))):
            if i >= len(s_sub.node_ids) or i >= len(t_sub.node_ids):
                divergence = {"reason": "subgraph sizes differ", "index": i,
                              "source_size": len(s_sub.node_ids), "target_size": len(t_sub.node_ids)}
                break
            sn, tn = s_sub.node_ids[i], t_sub.node_ids[i]
            interior = sn not in endpoints_s
            if _signature(source, sn, interior) != _signature(target, tn, interior):
                divergence = {"reason": "node differs", "index": i, "source_node": sn, "target_node": tn}
                break
    if divergence is None:
        return []
    return [FaultReport(Category.CG, layer_pair, {
        "divergence": divergence,
        "source_subgraph": s_sub,
        "target_subgraph": t_sub,
    })]
