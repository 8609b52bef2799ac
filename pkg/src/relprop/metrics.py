"""Fidelity metrics between masked and unmasked forward passes.

The sweep ranks the top-k relevance paths for every k up to a budget,
masks the network down to each prefix's channels, and scores the masked
logits against the full ones. Because the k-best list has the prefix
property (its first j entries are exactly the j-best paths), one path
computation serves the whole sweep.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .graph import RelevanceGraph, paths_to_mask, top_k_paths
from .network import Network, forward_trace, masked_forward


def mse(predicted, actual) -> float:
    """Mean squared error over all entries."""
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ShapeError(f"shape mismatch {predicted.shape} vs {actual.shape}")
    return float(np.mean((predicted - actual) ** 2))


def smape(predicted, actual) -> float:
    """Symmetric mean absolute percentage error, in [0, 200].

    Each term is |p - a| / ((|p| + |a|) / 2) * 100 / n; pairs where both
    values are exactly zero contribute nothing.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if predicted.shape != actual.shape:
        raise ShapeError(f"shape mismatch {predicted.shape} vs {actual.shape}")
    denom = (np.abs(predicted) + np.abs(actual)) / 2.0
    num = np.abs(predicted - actual)
    terms = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return float(100.0 * terms.mean())


@dataclass(frozen=True)
class KRow:
    k: int
    mse: float
    smape: float
    predicted: np.ndarray


@dataclass
class MetricsReport:
    rows: list[KRow]
    chosen_k: int
    rule: str
    actual: np.ndarray


def choose_k(rows, rule: str = "mean") -> int:
    """Pick the sweep's preferred k.

    ``mean``: the smallest k whose MSE is at or below the mean of all sweep
    MSEs. ``elbow``: the k with the largest positive curvature of the MSE
    sequence (second difference), ties to the smallest k; sweeps shorter
    than three rows fall back to the mean rule.
    """
    if not rows:
        raise GraphError("cannot choose k from an empty sweep")
    mses = np.array([r.mse for r in rows], dtype=np.float64)
    if rule == "elbow" and len(rows) >= 3:
        curvature = mses[:-2] - 2.0 * mses[1:-1] + mses[2:]
        return rows[int(np.argmax(curvature)) + 1].k
    if rule in ("mean", "elbow"):
        threshold = float(mses.mean())
        for row in rows:
            if row.mse <= threshold:
                return row.k
        return rows[-1].k  # unreachable: the minimum is always <= the mean
    raise GraphError(f"unknown k selection rule {rule!r}")


def k_sweep(
    net: Network,
    image,
    graph: RelevanceGraph,
    k_max: int,
    rule: str = "mean",
    jobs: int = 1,
) -> MetricsReport:
    """Score masked forwards for every k in 1..k_max against the full pass."""
    if k_max < 1:
        raise GraphError(f"k_max must be >= 1, got {k_max}")
    actual = forward_trace(net, image).scores
    all_paths = top_k_paths(graph, k_max)

    def row_for(k: int) -> KRow:
        prefix = all_paths[: min(k, len(all_paths))]
        predicted = masked_forward(net, image, paths_to_mask(prefix, graph))
        return KRow(
            k=k,
            mse=mse(predicted, actual),
            smape=smape(predicted, actual),
            predicted=predicted,
        )

    ks = range(1, k_max + 1)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(row_for, ks))
    else:
        rows = [row_for(k) for k in ks]
    return MetricsReport(
        rows=rows, chosen_k=choose_k(rows, rule), rule=rule, actual=actual
    )


def to_csv(report: MetricsReport) -> str:
    lines = ["k,mse,smape"]
    for row in report.rows:
        lines.append(f"{row.k},{row.mse:.9g},{row.smape:.9g}")
    return "\n".join(lines) + "\n"


def format_table(report: MetricsReport) -> str:
    """Human-readable sweep summary for the terminal."""
    lines = [f"{'k':>4}  {'mse':>14}  {'smape':>10}"]
    for row in report.rows:
        marker = " *" if row.k == report.chosen_k else ""
        lines.append(f"{row.k:>4}  {row.mse:>14.6g}  {row.smape:>10.4g}{marker}")
    lines.append(f"chosen k = {report.chosen_k} ({report.rule} rule)")
    return "\n".join(lines)
