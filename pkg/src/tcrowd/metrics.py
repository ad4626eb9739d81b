"""Error Rate (categorical) and MNAD (continuous) against ground truth.

Both take dense (N, M) arrays: label indices on categorical columns, real
values on continuous ones, NaN where a cell has no ground truth.  A metric
that does not apply to the table (no categorical / no continuous cells)
comes back as ``None``.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .core import AnswerSet, TableSchema


def _covered(estimates, truth, cols):
    t = truth[:, cols]
    e = estimates[:, cols]
    have = ~np.isnan(t)
    if np.any(np.isnan(e[have])):
        raise ValueError("estimates missing for cells with ground truth")
    return e, t, have


def error_rate(estimates: np.ndarray, truth: np.ndarray, schema: TableSchema) -> float | None:
    """Fraction of categorical cells whose estimate differs from the truth."""
    cols = np.nonzero(schema.categorical_mask)[0]
    if len(cols) == 0:
        return None
    e, t, have = _covered(np.asarray(estimates, float), np.asarray(truth, float), cols)
    if not have.any():
        return None
    return float(np.mean(e[have] != t[have]))


def column_answer_std(answers: AnswerSet) -> np.ndarray:
    """Population std of all answers per column (NaN with fewer than 2)."""
    _, _, cols, values = answers.arrays()
    out = np.full(answers.schema.n_cols, np.nan)
    for j in range(answers.schema.n_cols):
        v = values[cols == j]
        if len(v) >= 2:
            out[j] = v.std()
    return out


def mnad(estimates: np.ndarray, truth: np.ndarray, answers: AnswerSet,
         schema: TableSchema) -> float | None:
    """Mean over continuous columns of RMSE / std(answers in that column)."""
    cols = np.nonzero(~schema.categorical_mask)[0]
    if len(cols) == 0:
        return None
    estimates = np.asarray(estimates, float)
    truth = np.asarray(truth, float)
    std = column_answer_std(answers)
    per_col = []
    for j in cols:
        e, t, have = _covered(estimates, truth, [j])
        if not have.any():
            continue
        s = std[j]
        if not (s > 0):
            warnings.warn(f"column {schema.columns[j].name!r} excluded from MNAD: "
                          "answer standard deviation is zero or undefined")
            continue
        rmse = math.sqrt(float(np.mean((e[have] - t[have]) ** 2)))
        per_col.append(rmse / s)
    if not per_col:
        return None
    return float(np.mean(per_col))
