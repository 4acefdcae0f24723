from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from ..stats import aggregate_ranks
from .activations import ActivationAnalysis
from .reports import Category, FaultReport, LayerPair


@dataclass(frozen=True)
class SuspiciousRanking:
    pairs: tuple[LayerPair, ...]
    mean_ranks: tuple[float, ...]

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def position(self, pair: LayerPair) -> int | None:
        try:
            return self.pairs.index(pair)
        except ValueError:
            return None


def param_mismatch_counts(reports: Iterable[FaultReport]) -> dict[LayerPair, int]:
    """Static suspicion per layer: mismatched parameter elements plus differing attributes."""
    counts: dict[LayerPair, int] = {}
    for r in reports:
        pair = r.layer_pair
        if pair is None:
            continue
        if r.category == Category.WB:
            n = r.detail.get("mismatched_elements", 0) + len(r.detail.get("shape", ()))
        elif r.category == Category.LH:
            n = 1
        else:
            continue
        counts[pair] = counts.get(pair, 0) + n
    return counts


def _grouped_descending(layers: Sequence[LayerPair], score: Mapping[LayerPair, float]) -> list[list[LayerPair]]:
    """Layers grouped by equal score, highest score first, declaration order inside a group."""
    groups: dict[float, list[LayerPair]] = {}
    for pair in layers:
        groups.setdefault(score.get(pair, 0), []).append(pair)
    return [groups[s] for s in sorted(groups, reverse=True)]


def rank_suspicious_layers(layers: Sequence[LayerPair], param_counts: Mapping[LayerPair, int] | None,
                           activation_runs: Sequence[ActivationAnalysis]) -> SuspiciousRanking:
    """Combine the static parameter ordering and each activation run by mean rank.

    Within a run, layers with equal counts share a midrank. Layers whose
    activations could not be compared (shape mismatch) rank as most suspicious.
    """
    layers = list(layers)
    if not layers:
        return SuspiciousRanking((), ())
    rankings = []
    if param_counts is not None:
        rankings.append(_grouped_descending(layers, param_counts))
    for run in activation_runs:
        score = {p: (math.inf if p in run.skipped else run.count(p)) for p in layers}
        rankings.append(_grouped_descending(layers, score))
    if not rankings:
        rankings.append([list(layers)])
    declared = {p: i for i, p in enumerate(layers)}
    agg = aggregate_ranks(rankings, tie_key=declared.__getitem__)
    return SuspiciousRanking(tuple(agg.items), agg.mean_ranks)
