"""Per-element activation difference analysis for matched layers.

Differences ``|source - target|`` observed on images whose labels agree form
the expected distribution for every output element of a layer. Elements whose
differences on disagreeing images fail a two-sample Kruskal-Wallis test are
counted as problematic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..interpreter.preprocess import prepare_input
from ..interpreter.runtime import ActivationTrace, infer_traced
from ..ir.model import GraphModel
from ..stats import SIGNIFICANCE, kruskal_wallis_columns
from .matching import LayerMatching
from .reports import LayerPair

DEFAULT_ELEMENT_CAP = 4096


@dataclass
class ActivationAnalysis:
    problematic: dict[LayerPair, int]
    element_counts: dict[LayerPair, int]
    skipped: dict[LayerPair, str] = field(default_factory=dict)
    expected: dict[LayerPair, np.ndarray] = field(default_factory=dict, repr=False)

    def count(self, pair: LayerPair) -> int:
        return self.problematic.get(pair, 0)


def trace_images(model: GraphModel, images: Sequence[np.ndarray]) -> list[ActivationTrace]:
    return [infer_traced(model, prepare_input(img, model)) for img in images]


def layer_differences(src_traces: Sequence[ActivationTrace], tgt_traces: Sequence[ActivationTrace],
                      pairs: Sequence[LayerPair]) -> tuple[dict[LayerPair, np.ndarray], dict[LayerPair, str]]:
    """Stack ``|src - tgt|`` per layer into (n_images x n_elements) arrays."""
    diffs: dict[LayerPair, np.ndarray] = {}
    skipped: dict[LayerPair, str] = {}
    for pair in pairs:
        s_id, t_id = pair
        rows = []
        for st, tt in zip(src_traces, tgt_traces):
            a, b = st.activations[s_id], tt.activations[t_id]
            if a.shape != b.shape:
                skipped[pair] = f"activation shape {list(a.shape)} vs {list(b.shape)}"
                break
            rows.append(np.abs(a.astype(np.float64) - b.astype(np.float64)).ravel())
        if pair not in skipped:
            diffs[pair] = np.stack(rows) if rows else np.zeros((0, 0))
    return diffs, skipped


def stratified_indices(n: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn index from each of ``cap`` equal-width strata of ``range(n)``."""
    edges = np.linspace(0, n, cap + 1)
    lo = np.floor(edges[:-1]).astype(np.int64)
    hi = np.maximum(np.floor(edges[1:]).astype(np.int64), lo + 1)
    return lo + (rng.random(cap) * (hi - lo)).astype(np.int64)


def analyze_differences(sim_diffs: Mapping[LayerPair, np.ndarray], diss_diffs: Mapping[LayerPair, np.ndarray],
                        skipped: Mapping[LayerPair, str] | None = None, significance: float = SIGNIFICANCE,
                        element_cap: int | None = DEFAULT_ELEMENT_CAP, seed: int = 0) -> ActivationAnalysis:
    rng = np.random.default_rng(seed)
    problematic: dict[LayerPair, int] = {}
    element_counts: dict[LayerPair, int] = {}
    for pair, a in sim_diffs.items():
        b = diss_diffs[pair]
        n_elems = a.shape[1]
        element_counts[pair] = n_elems
        if element_cap is not None and n_elems > element_cap:
            cols = stratified_indices(n_elems, element_cap, rng)
            a, b = a[:, cols], b[:, cols]
        _, p = kruskal_wallis_columns(a, b)
        problematic[pair] = int(np.count_nonzero(p < significance))
    return ActivationAnalysis(problematic, element_counts, dict(skipped or {}), dict(sim_diffs))


def activation_analysis(source: GraphModel, target: GraphModel, sim_images: Sequence[np.ndarray],
                        diss_images: Sequence[np.ndarray], matching: LayerMatching,
                        significance: float = SIGNIFICANCE, element_cap: int | None = DEFAULT_ELEMENT_CAP,
                        seed: int = 0) -> ActivationAnalysis:
    if len(sim_images) < 2 or len(diss_images) < 1:
        raise ValueError("need at least 2 similar and 1 dissimilar image")
    pairs = matching.layer_pairs(source)
    sim, skipped = layer_differences(trace_images(source, sim_images), trace_images(target, sim_images), pairs)
    diss, skipped_d = layer_differences(trace_images(source, diss_images), trace_images(target, diss_images), pairs)
    skipped.update(skipped_d)
    sim = {p: v for p, v in sim.items() if p not in skipped}
    diss = {p: v for p, v in diss.items() if p not in skipped}
    return analyze_differences(sim, diss, skipped, significance, element_cap, seed)
