"""Majority voting (categorical) and median (continuous) aggregation."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .core import AnswerSet


class NoEstimate(ValueError):
    """A cell has no answers to aggregate."""


def majority_vote(labels: Iterable[int]) -> int:
    """Most frequent label index; ties go to the lowest index."""
    labels = np.asarray(list(labels), dtype=np.int64)
    if labels.size == 0:
        raise NoEstimate("majority vote of an empty answer list")
    if labels.min() < 0:
        raise ValueError("label indices must be non-negative")
    return int(np.argmax(np.bincount(labels)))


def median_vote(values: Iterable[float]) -> float:
    """Median; an even count gives the midpoint of the two central values."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise NoEstimate("median of an empty answer list")
    return float(np.median(values))


def baseline_estimates(answers: AnswerSet, method: str = "both") -> np.ndarray:
    """(N, M) estimates from the baselines; NaN for unanswered cells.

    ``method`` is "mv" (categorical columns only), "median" (continuous
    only) or "both".
    """
    if method not in ("mv", "median", "both"):
        raise ValueError(f"unknown baseline {method!r}")
    schema = answers.schema
    out = np.full((schema.n_rows, schema.n_cols), np.nan)
    by_cell: dict = {}
    for a in answers:
        by_cell.setdefault((a.row, a.col), []).append(a.value)
    for (i, j), values in by_cell.items():
        cat = schema.columns[j].is_categorical
        if cat and method in ("mv", "both"):
            out[i, j] = majority_vote(values)
        elif not cat and method in ("median", "both"):
            out[i, j] = median_vote(values)
    return out
