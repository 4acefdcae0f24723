"""Structural validation and graph analyses over ``GraphModel``."""

from __future__ import annotations

import heapq
from collections import deque

from ..errors import GraphError
from .model import (
    ENTRY,
    LAYOUTS,
    OP_SCHEMAS,
    TENSOR_DTYPES,
    WEIGHT_ROLES,
    GraphModel,
    Subgraph,
)


def validate(model: GraphModel) -> list[str]:
    """Return every invariant violation; an empty list means the model is valid."""
    violations: list[str] = []
    spec = model.input
    if not spec.shape or any(d < 1 for d in spec.shape):
        violations.append(f"input shape {list(spec.shape)} must be non-empty with positive dims")
    if spec.layout not in LAYOUTS:
        violations.append(f"input layout {spec.layout!r} not in {LAYOUTS}")
    pp = model.preproc
    if len(pp.mean) != 3 or len(pp.std) != 3:
        violations.append("preprocessing mean/std must have 3 components")
    if any(s == 0 for s in pp.std):
        violations.append("preprocessing std components must be non-zero")
    if pp.layout not in LAYOUTS:
        violations.append(f"preprocessing layout {pp.layout!r} not in {LAYOUTS}")

    seen_ids: set[str] = set()
    produced: dict[str, str] = {}
    for node in model.nodes:
        if node.id in seen_ids:
            violations.append(f"duplicate node id {node.id}")
        seen_ids.add(node.id)
        schema = OP_SCHEMAS.get(node.op)
        if schema is None:
            violations.append(f"unsupported op {node.op} at node {node.id}")
        else:
            n_in = len(node.inputs)
            if not schema.min_inputs <= n_in <= schema.max_inputs:
                violations.append(f"node {node.id} has {n_in} inputs, {node.op} takes "
                                  f"{schema.min_inputs}..{schema.max_inputs}")
            for key in node.attrs:
                if key not in schema.attrs:
                    violations.append(f"attribute {key} not allowed on {node.op} node {node.id}")
            for role in schema.required_weights - set(node.weights):
                violations.append(f"node {node.id} missing weight {role}")
            for role in node.weights:
                if role not in schema.required_weights | schema.optional_weights:
                    violations.append(f"weight role {role} not allowed on {node.op} node {node.id}")
        for role, tensor in node.weights.items():
            if role not in WEIGHT_ROLES:
                continue
            if tensor.dtype not in TENSOR_DTYPES:
                violations.append(f"weight {role} of node {node.id} has dtype {tensor.dtype}")
            if tensor.ndim == 0 or any(d < 1 for d in tensor.shape):
                violations.append(f"weight {role} of node {node.id} has bad shape {list(tensor.shape)}")
        if len(node.outputs) != 1:
            violations.append(f"node {node.id} must have exactly one output")
        for v in node.outputs:
            if v == spec.name:
                violations.append(f"node {node.id} redefines the model input {v}")
            elif v in produced:
                violations.append(f"value {v} produced by both {produced[v]} and {node.id}")
            else:
                produced[v] = node.id

    for node in model.nodes:
        for v in node.inputs:
            if v != spec.name and v not in produced:
                violations.append(f"undefined input {v} at node {node.id}")

    if model.output not in produced:
        violations.append(f"output {model.output} is not produced by any node")
    consumed = {v for n in model.nodes for v in n.inputs}
    for v, nid in produced.items():
        if v != model.output and v not in consumed:
            violations.append(f"dangling value {v} from node {nid}")

    if not _is_acyclic(model):
        violations.append("graph is not acyclic")
    return violations


def _is_acyclic(model: GraphModel) -> bool:
    try:
        topo_order(model)
    except GraphError:
        return False
    return True


def topo_order(model: GraphModel) -> list[str]:
    """Kahn's algorithm; ready nodes are released in declaration order."""
    indegree = {n.id: 0 for n in model.nodes}
    for n in model.nodes:
        indegree[n.id] = sum(1 for p in model.predecessors(n.id) if p != ENTRY)
    ready = [model.position(nid) for nid, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        nid = model.nodes[heapq.heappop(ready)].id
        order.append(nid)
        for succ in model.successors(nid):
            indegree[succ] -= 1
            if indegree[succ] == 0:
                heapq.heappush(ready, model.position(succ))
    if len(order) != len(model.nodes):
        raise GraphError("cycle detected")
    return order


def _reverse_postorder(model: GraphModel) -> list[str]:
    visited: set[str] = set()
    post: list[str] = []
    stack: list[tuple[str, int]] = [(ENTRY, 0)]
    visited.add(ENTRY)
    while stack:
        nid, i = stack.pop()
        succ = model.successors(nid)
        if i < len(succ):
            stack.append((nid, i + 1))
            nxt = succ[i]
            if nxt not in visited:
                visited.add(nxt)
                stack.append((nxt, 0))
        else:
            post.append(nid)
    return post[::-1]


def dominator_tree(model: GraphModel) -> dict[str, str]:
    """Immediate dominator of every node reachable from the model input.

    Iterative dataflow over reverse postorder (Cooper, Harvey & Kennedy).
    ``ENTRY`` maps to itself.
    """
    rpo = _reverse_postorder(model)
    order = {nid: i for i, nid in enumerate(rpo)}
    idom: dict[str, str] = {ENTRY: ENTRY}

    def intersect(a: str, b: str) -> str:
        while a != b:
            while order[a] > order[b]:
                a = idom[a]
            while order[b] > order[a]:
                b = idom[b]
        return a

    changed = True
    while changed:
        changed = False
        for nid in rpo[1:]:
            preds = [p for p in model.predecessors(nid) if p in idom]
            if not preds:
                continue
            new = preds[0]
            for p in preds[1:]:
                new = intersect(p, new)
            if idom.get(nid) != new:
                idom[nid] = new
                changed = True
    return idom


def immediate_dominator(model: GraphModel, node_id: str) -> str:
    if not model.has_node(node_id):
        raise GraphError(f"unknown node {node_id!r}")
    idom = dominator_tree(model)
    if node_id not in idom:
        raise GraphError(f"node {node_id} is not reachable from the model input")
    return idom[node_id]


def dominators_of(model: GraphModel, node_id: str, idom: dict[str, str] | None = None) -> list[str]:
    """Strict dominators of ``node_id``, nearest first, ending with ``ENTRY``."""
    idom = idom if idom is not None else dominator_tree(model)
    if node_id not in idom:
        raise GraphError(f"node {node_id} is not reachable from the model input")
    chain: list[str] = []
    cur = node_id
    while cur != ENTRY:
        cur = idom[cur]
        chain.append(cur)
    return chain


def dominates(model: GraphModel, dom_id: str, node_id: str, idom: dict[str, str] | None = None) -> bool:
    if dom_id == node_id:
        return True
    return dom_id in dominators_of(model, node_id, idom)


def subgraph_between(model: GraphModel, node_id: str, dom_id: str) -> Subgraph:
    """All nodes on paths from ``dom_id`` to ``node_id``, in BFS order from the dominator."""
    if not model.has_node(node_id):
        raise GraphError(f"unknown node {node_id!r}")
    if dom_id != ENTRY and not model.has_node(dom_id):
        raise GraphError(f"unknown node {dom_id!r}")
    if not dominates(model, dom_id, node_id):
        raise GraphError(f"{dom_id} does not dominate {node_id}")

    # Nodes that can reach node_id, found by walking predecessors backwards.
    reaches = {node_id}
    todo = deque([node_id])
    while todo:
        cur = todo.popleft()
        if cur == dom_id:
            continue
        for p in model.predecessors(cur):
            if p not in reaches:
                reaches.add(p)
                todo.append(p)

    order = [dom_id]
    seen = {dom_id}
    queue = deque([dom_id])
    while queue:
        cur = queue.popleft()
        if cur == node_id:
            continue
        for s in model.successors(cur):
            if s in reaches and s not in seen:
                seen.add(s)
                order.append(s)
                queue.append(s)
    return Subgraph(root_id=node_id, dominator_id=dom_id, node_ids=tuple(order))
