"""Fault localisation: layer matching, the six detectors, activation analysis, ranking."""

from .activations import (
    DEFAULT_ELEMENT_CAP,
    ActivationAnalysis,
    activation_analysis,
    analyze_differences,
    layer_differences,
    trace_images,
)
from .detectors import (
    check_input_dims,
    check_preprocessing,
    check_tensor_structure,
    compare_graph,
    compare_hyperparams,
    compare_weights,
    dominating_layer,
    input_prefix,
    layer_subgraph,
)
from .matching import LAYER_OPS, LayerMatching, match_layers
from .ranking import SuspiciousRanking, param_mismatch_counts, rank_suspicious_layers
from .reports import MODEL_INPUT, Category, FaultReport, LayerPair, LocalizationResult

__all__ = [
    "DEFAULT_ELEMENT_CAP", "LAYER_OPS", "MODEL_INPUT", "ActivationAnalysis", "Category", "FaultReport",
    "LayerMatching", "LayerPair", "LocalizationResult", "SuspiciousRanking", "activation_analysis",
    "analyze_differences", "check_input_dims", "check_preprocessing", "check_tensor_structure",
    "compare_graph", "compare_hyperparams", "compare_weights", "dominating_layer", "input_prefix",
    "layer_differences", "layer_subgraph", "match_layers", "param_mismatch_counts",
    "rank_suspicious_layers", "trace_images",
]
