"""Pairing Source nodes with their Target counterparts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ir.model import PARAM_ROLES, GraphModel, NodeDef
from .reports import LayerPair

LAYER_OPS = frozenset({"Conv"})


@dataclass(frozen=True)
class LayerMatching:
    pairs: tuple[LayerPair, ...]
    unmatched_source: tuple[str, ...]
    unmatched_target: tuple[str, ...]

    def target_of(self, source_id: str) -> str | None:
        for s, t in self.pairs:
            if s == source_id:
                return t
        return None

    def source_of(self, target_id: str) -> str | None:
        for s, t in self.pairs:
            if t == target_id:
                return s
        return None

    def layer_pairs(self, source: GraphModel) -> list[LayerPair]:
        """Matched convolutional layers in Source execution order."""
        order = {nid: i for i, nid in enumerate(source.execution_order)}
        pairs = [p for p in self.pairs if source.node(p[0]).op in LAYER_OPS]
        return sorted(pairs, key=lambda p: order[p[0]])


def _value_distance(a: NodeDef, b: NodeDef) -> float:
    dists = []
    for role in PARAM_ROLES:
        if role in a.weights:
            x = a.weights[role].astype(np.float64)
            y = b.weights[role].astype(np.float64)
            dists.append(float(np.mean(np.abs(x - y))))
    return float(np.mean(dists)) if dists else 0.0


def _occurrence(model: GraphModel) -> dict[str, int]:
    seen: dict[str, int] = {}
    occ = {}
    for nid in model.execution_order:
        op = model.node(nid).op
        occ[nid] = seen.get(op, 0)
        seen[op] = occ[nid] + 1
    return occ


def match_layers(source: GraphModel, target: GraphModel) -> LayerMatching:
    """Greedy matching in Source topological order over same-op nodes.

    Candidates are scored by exact id match, then identical parameter shapes,
    then parameter value proximity, then relative position among nodes of the
    same op. Nodes carrying parameters only match on an id or shape match.
    """
    src_occ, tgt_occ = _occurrence(source), _occurrence(target)
    used: set[str] = set()
    pairs: list[LayerPair] = []
    unmatched_source: list[str] = []
    for sid in source.execution_order:
        snode = source.node(sid)
        best = None
        best_score = None
        for tid in target.execution_order:
            if tid in used:
                continue
            tnode = target.node(tid)
            if tnode.op != snode.op:
                continue
            same_name = sid == tid
            sig_s, sig_t = snode.param_signature(), tnode.param_signature()
            same_shape = sig_s == sig_t
            if (sig_s or sig_t) and not (same_name or same_shape):
                continue
            dist = _value_distance(snode, tnode) if same_shape else float("inf")
            score = (same_name, same_shape, -dist, -abs(src_occ[sid] - tgt_occ[tid]), -target.position(tid))
            if best_score is None or score > best_score:
                best, best_score = tid, score
        if best is None:
            unmatched_source.append(sid)
        else:
            used.add(best)
            pairs.append((sid, best))
    unmatched_target = [t for t in target.execution_order if t not in used]
    return LayerMatching(tuple(pairs), tuple(unmatched_source), tuple(unmatched_target))
