"""Interpretation of learned coordinates and classifier influence.

Because both embedding layers are non-negative, each coordinate can be read
directly: the codes with the largest weights on a code coordinate describe
what activates it, and the code coordinates with the largest weights on a
visit coordinate describe what drives that visit dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Vocabulary
from .model import ModelParams
from .validation import check_vector


@dataclass(frozen=True)
class CoordinateReport:
    """Descending ranking of items (ties broken by ascending index)."""

    coordinate: int
    items: tuple[tuple[int, float], ...]
    kind: str  # "code" or "code-coordinate"


@dataclass(frozen=True)
class InfluenceVector:
    """Per-code-coordinate influence on a downstream linear classifier."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise ValueError("influence values must form a vector")
        if values.size and values.min() < 0:
            raise ValueError("influence values must be non-negative")
        object.__setattr__(self, "values", values)


def _ranked(values: np.ndarray, k: int) -> tuple[tuple[int, float], ...]:
    # stable sort on the negated values keeps ties in ascending index order
    order = np.argsort(-values, kind="stable")[:k]
    return tuple((int(i), float(values[i])) for i in order)


def top_codes_for_coordinate(params: ModelParams, coordinate: int, k: int) -> CoordinateReport:
    """The k codes with the largest weights on one code-embedding coordinate."""
    if not 0 <= coordinate < params.code_dim:
        raise ValueError(f"coordinate {coordinate} out of range [0, {params.code_dim})")
    if not 1 <= k <= params.n_codes:
        raise ValueError(f"k must lie in [1, {params.n_codes}]")
    return CoordinateReport(coordinate, _ranked(params.code_weights[coordinate], k), "code")


def top_coords_for_visit_coordinate(
    params: ModelParams, coordinate: int, k: int
) -> CoordinateReport:
    """The k code coordinates most strongly wired into one visit coordinate.

    Only the code-coordinate block of the visit weight matrix is ranked; the
    demographic columns are excluded.
    """
    if not 0 <= coordinate < params.visit_dim:
        raise ValueError(f"coordinate {coordinate} out of range [0, {params.visit_dim})")
    if not 1 <= k <= params.code_dim:
        raise ValueError(f"k must lie in [1, {params.code_dim}]")
    row = params.visit_weights[coordinate, : params.code_dim]
    return CoordinateReport(coordinate, _ranked(row, k), "code-coordinate")


def classifier_influence(params: ModelParams, lr_weights) -> InfluenceVector:
    """Closed-form influence of each code coordinate on a linear classifier.

    The visit-level input maximizing the classifier activation (unit-norm,
    non-negative, demographics held at zero) is proportional to the positive
    part of Wv^T w restricted to the code-coordinate block.  Each entry is
    then scaled by that coordinate's maximum attainable activation over
    single codes, max(0, max_j Wc[i, j] + bc[i]), since coordinates differ in
    how strongly they can fire.
    """
    w = check_vector("lr_weights", lr_weights, params.visit_dim)
    direction = np.maximum(params.visit_weights.T @ w, 0.0)[: params.code_dim]
    norm = np.linalg.norm(direction)
    if norm > 0:
        direction = direction / norm
    ceiling = np.maximum(params.code_weights.max(axis=1) + params.code_bias, 0.0)
    return InfluenceVector(direction * ceiling)


def render_report(
    report: CoordinateReport | InfluenceVector,
    vocabulary: Vocabulary | None = None,
    *,
    top: int | None = None,
) -> str:
    """Aligned text table; values to 4 decimals, deterministic for equal input."""
    if isinstance(report, InfluenceVector):
        items = _ranked(report.values, top if top is not None else report.values.size)
        header = "influence of code coordinates"
        kind = "code-coordinate"
    else:
        items = report.items if top is None else report.items[:top]
        noun = "codes" if report.kind == "code" else "code coordinates"
        header = f"coordinate {report.coordinate}: top {noun}"
        kind = report.kind

    if kind == "code":
        if vocabulary is None:
            raise ValueError("a vocabulary is required to render code names")
        names = [vocabulary.token(i) for i, _ in items]
    else:
        names = [f"coord {i}" for i, _ in items]

    width = max([len("item")] + [len(n) for n in names])
    lines = [header, f"{'rank':>4}  {'item':<{width}}  {'value':>10}"]
    for rank, ((_, value), name) in enumerate(zip(items, names), start=1):
        lines.append(f"{rank:>4}  {name:<{width}}  {value:>10.4f}")
    return "\n".join(lines) + "\n"
