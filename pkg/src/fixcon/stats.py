"""Rank statistics: Kendall's tau, two-sample Kruskal-Wallis, mean-rank aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np
from scipy.special import erfc

from .errors import StatsError

SIGNIFICANCE = 0.05


def _as_order(ranking) -> list:
    order = getattr(ranking, "order", ranking)
    return list(order)


def _count_inversions(seq: list[int]) -> int:
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    count = _count_inversions(left) + _count_inversions(right)
    merged: list[int] = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i] <= right[j]:
            merged.append(left[i])
            i += 1
        else:
            merged.append(right[j])
            count += len(left) - i
            j += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    seq[:] = merged
    return count


def kendall_tau(a, b) -> float:
    """Tau-a between two strict rankings of the same items.

    Accepts ``LabelRanking`` objects or plain sequences of item ids, best first.
    """
    oa, ob = _as_order(a), _as_order(b)
    if len(oa) != len(ob) or set(oa) != set(ob) or len(set(oa)) != len(oa):
        raise StatsError("rankings must order the same set of distinct items")
    n = len(oa)
    if n < 2:
        return 1.0
    pos_b = {item: i for i, item in enumerate(ob)}
    discordant = _count_inversions([pos_b[item] for item in oa])
    pairs = n * (n - 1) // 2
    return (pairs - 2 * discordant) / pairs


@dataclass(frozen=True)
class KWResult:
    h_statistic: float
    p_value: float
    groups: int = 2


def _midranks(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column-wise midranks of ``x`` (N x E) and the tie term sum(t^3 - t) per column."""
    n, e = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    s = np.take_along_axis(x, order, axis=0)
    starts = np.ones_like(s, dtype=bool)
    starts[1:] = s[1:] != s[:-1]
    gid = np.cumsum(starts, axis=0) - 1
    flat = gid + np.arange(e)[None, :] * n
    positions = np.broadcast_to(np.arange(1, n + 1, dtype=np.float64)[:, None], (n, e))
    sums = np.bincount(flat.ravel(), weights=positions.ravel(), minlength=n * e)
    counts = np.bincount(flat.ravel(), minlength=n * e).astype(np.float64)
    mid = (sums[flat] / counts[flat])
    ranks = np.empty((n, e), dtype=np.float64)
    np.put_along_axis(ranks, order, mid, axis=0)
    tie_term = np.bincount(np.arange(n * e) // n, weights=counts ** 3 - counts, minlength=e)
    return ranks, tie_term


def kruskal_wallis_columns(sample_a: np.ndarray, sample_b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Independent two-sample tests, one per column.

    ``sample_a`` is (na x E), ``sample_b`` is (nb x E). Returns (H, p) arrays of
    length E; H is tie-corrected, p is the chi-square (df=1) survival value.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    na, nb = a.shape[0], b.shape[0]
    if na == 0 or nb == 0:
        raise StatsError("both samples must be non-empty")
    if na + nb < 3:
        raise StatsError("need at least 3 observations in total")
    if a.shape[1] != b.shape[1]:
        raise StatsError("samples disagree on column count")
    n = na + nb
    ranks, tie_term = _midranks(np.concatenate([a, b], axis=0))
    ra = ranks[:na].sum(axis=0)
    rb = ranks[na:].sum(axis=0)
    h = 12.0 / (n * (n + 1)) * (ra ** 2 / na + rb ** 2 / nb) - 3.0 * (n + 1)
    correction = 1.0 - tie_term / (n ** 3 - n)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(correction > 1e-12, h / correction, 0.0)
    h = np.maximum(h, 0.0)
    # chi-square df=1 survival: P(X > h) = erfc(sqrt(h / 2))
    p = erfc(np.sqrt(h / 2.0))
    return h, p


def kruskal_wallis(sample_a: Sequence[float], sample_b: Sequence[float]) -> KWResult:
    h, p = kruskal_wallis_columns(np.asarray(sample_a, dtype=np.float64),
                                  np.asarray(sample_b, dtype=np.float64))
    return KWResult(float(h[0]), float(min(max(p[0], 0.0), 1.0)))


@dataclass(frozen=True)
class RankAggregate:
    items: tuple[Hashable, ...]
    mean_ranks: tuple[float, ...]

    def __iter__(self):
        return iter(self.items)


def aggregate_ranks(rankings: Sequence[Sequence], tie_key: Callable[[Hashable], object] | None = None) -> RankAggregate:
    """Mean-rank (Borda) combination of several orderings, best first.

    An entry of a ranking may be a list or set of ids that are tied; they
    share the midrank of the positions they occupy (tuples are plain ids).
    Equal mean ranks are broken by ``tie_key``, default the id itself.
    """
    if not rankings:
        raise StatsError("no rankings to aggregate")
    totals: dict[Hashable, float] = {}
    reference: set | None = None
    for ranking in rankings:
        ranks: dict[Hashable, float] = {}
        pos = 0
        for entry in ranking:
            group = list(entry) if isinstance(entry, (list, set, frozenset)) else [entry]
            mid = pos + (len(group) + 1) / 2.0
            for item in group:
                if item in ranks:
                    raise StatsError(f"item {item!r} ranked twice")
                ranks[item] = mid
            pos += len(group)
        if reference is None:
            reference = set(ranks)
        elif set(ranks) != reference:
            raise StatsError("rankings disagree on the item set")
        for item, r in ranks.items():
            totals[item] = totals.get(item, 0.0) + r
    key = tie_key or (lambda item: item)
    means = {item: total / len(rankings) for item, total in totals.items()}
    ordered = sorted(means, key=lambda item: (means[item], key(item)))
    return RankAggregate(tuple(ordered), tuple(means[i] for i in ordered))
