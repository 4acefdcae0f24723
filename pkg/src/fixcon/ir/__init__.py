"""Graph intermediate representation, persistence and analyses."""

from .graph import (
    dominates,
    dominator_tree,
    dominators_of,
    immediate_dominator,
    subgraph_between,
    topo_order,
    validate,
)
from .io import load_model, model_to_manifest, save_model
from .model import (
    ENTRY,
    HYPERPARAMS,
    OP_SCHEMAS,
    PARAM_ROLES,
    SUPPORTED_OPS,
    GraphModel,
    InputSpec,
    NodeDef,
    PreprocessingConfig,
    Subgraph,
    Tensor,
    tensors_identical,
)

__all__ = [
    "ENTRY", "HYPERPARAMS", "OP_SCHEMAS", "PARAM_ROLES", "SUPPORTED_OPS",
    "GraphModel", "InputSpec", "NodeDef", "PreprocessingConfig", "Subgraph", "Tensor",
    "dominates", "dominator_tree", "dominators_of", "immediate_dominator", "load_model",
    "model_to_manifest", "save_model", "subgraph_between", "tensors_identical", "topo_order",
    "validate",
]
