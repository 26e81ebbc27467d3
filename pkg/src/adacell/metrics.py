"""Partition agreement scores and graph-degree diagnostics.

NMI and ARI are computed from an explicit contingency table with exact
integer pair counts; ARI performs its final division on integers so results
like -0.5 come out exact. Both scores are invariant to relabeling either
argument. Degree comparison reports whether a learned graph flattened the
heavy tail of the initial KNN graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .cellgraph import DegreeHistogram


@dataclass
class ContingencyTable:
    counts: list  # counts[u][v] over predicted cluster u x true class v
    row_totals: list
    col_totals: list
    n: int

    @classmethod
    def from_labels(cls, a, b) -> "ContingencyTable":
        if len(a) != len(b):
            raise ValueError(f"label vectors differ in length: {len(a)} vs {len(b)}")
        amap, bmap = {}, {}
        cells = {}
        for x, y in zip(a, b):
            u = amap.setdefault(x, len(amap))
            v = bmap.setdefault(y, len(bmap))
            cells[(u, v)] = cells.get((u, v), 0) + 1
        counts = [[0] * len(bmap) for _ in range(len(amap))]
        for (u, v), c in cells.items():
            counts[u][v] = c
        row = [sum(r) for r in counts]
        col = [sum(counts[u][v] for u in range(len(amap))) for v in range(len(bmap))]
        return cls(counts, row, col, len(a))


def _pairs(n: int) -> int:
    return n * (n - 1) // 2


def _entropy(totals, n) -> float:
    return -sum(t / n * math.log(t / n) for t in totals if t > 0)


def _same_partition(table: ContingencyTable) -> bool:
    # identical up to relabeling: every row and column hits exactly one cell
    return all(sum(1 for c in row if c > 0) == 1 for row in table.counts) and all(
        sum(1 for u in range(len(table.counts)) if table.counts[u][v] > 0) == 1
        for v in range(len(table.col_totals))
    )


def nmi(a, b, normalization: str = "geometric") -> float:
    """Mutual information over the label pair, normalized into [0, 1].

    Default normalization divides by the geometric mean of the two entropies;
    'arithmetic' divides by their average for cross-tool comparison. A
    zero-entropy argument yields 1 for identical partitions, else 0.
    """
    if normalization not in ("geometric", "arithmetic"):
        raise ValueError(f"unknown normalization {normalization!r}")
    t = ContingencyTable.from_labels(a, b)
    ha, hb = _entropy(t.row_totals, t.n), _entropy(t.col_totals, t.n)
    if ha == 0.0 or hb == 0.0:
        return 1.0 if _same_partition(t) else 0.0
    mi = 0.0
    for u, row in enumerate(t.counts):
        for v, c in enumerate(row):
            if c > 0:
                mi += c / t.n * math.log(t.n * c / (t.row_totals[u] * t.col_totals[v]))
    denom = math.sqrt(ha * hb) if normalization == "geometric" else 0.5 * (ha + hb)
    return min(1.0, max(0.0, mi / denom))


def ari(a, b) -> float:
    """Adjusted Rand index via exact integer pair counts.

    (Index - Expected) / (Max - Expected), scaled to integers before the one
    floating-point division. Degenerate Max = Expected returns 1 for
    identical partitions and 0 otherwise.
    """
    t = ContingencyTable.from_labels(a, b)
    if _pairs(t.n) == 0:
        return 1.0
    index = sum(_pairs(c) for row in t.counts for c in row)
    sum_a = sum(_pairs(r) for r in t.row_totals)
    sum_b = sum(_pairs(c) for c in t.col_totals)
    total = _pairs(t.n)
    # multiply through by 2*total: all terms stay integers
    numer = 2 * (total * index - sum_a * sum_b)
    denom = total * (sum_a + sum_b) - 2 * sum_a * sum_b
    if denom == 0:
        return 1.0 if _same_partition(t) else 0.0
    return numer / denom


def metrics_report(predicted, truth) -> dict:
    """JSON-ready agreement summary between predicted and true labels."""
    return {
        "nmi": nmi(predicted, truth),
        "ari": ari(predicted, truth),
        "n_cells": len(predicted),
        "n_clusters_pred": len(set(predicted)),
        "n_clusters_true": len(set(truth)),
    }


def _skewness(degrees) -> float:
    n = len(degrees)
    mean = sum(degrees) / n
    var = sum((d - mean) ** 2 for d in degrees) / n
    if var == 0.0:
        return 0.0
    third = sum((d - mean) ** 3 for d in degrees) / n
    return third / var**1.5


def compare_degree_distributions(before: DegreeHistogram, after: DegreeHistogram) -> dict:
    """Tail report between two degree histograms over the same nodes.

    `tail_mitigated` is true when the later graph's degree spread and hub
    size both stayed within the earlier graph's (non-strict).
    """
    if len(before.degrees) != len(after.degrees):
        raise ValueError(
            f"node counts differ: {len(before.degrees)} vs {len(after.degrees)}"
        )
    return {
        "delta_std": after.std - before.std,
        "delta_max": after.max - before.max,
        "skew_before": _skewness(before.degrees),
        "skew_after": _skewness(after.degrees),
        "tail_mitigated": bool(after.std <= before.std and after.max <= before.max),
    }
