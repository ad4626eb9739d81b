"""Dataset files: JSON schema, CSV answers/truth, CSV result tables.

Floats are written with ``repr`` so a file written twice from the same
numbers is byte-identical and reads back to the same doubles.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    Answer,
    AnswerSet,
    Column,
    ColumnKind,
    InvalidAnswerError,
    SchemaError,
    TableSchema,
)


class DatasetError(ValueError):
    """A dataset file failed to parse or validate."""

    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    if math.isnan(x):
        return ""
    return repr(x)


# -- schema ---------------------------------------------------------------------


def schema_to_dict(schema: TableSchema) -> dict:
    cols = []
    for c in schema.columns:
        d = {"name": c.name, "kind": c.kind.value}
        if c.is_categorical:
            d["labels"] = list(c.labels)
        elif c.range is not None:
            d["range"] = [float(c.range[0]), float(c.range[1])]
        cols.append(d)
    return {"columns": cols, "key": schema.key_attribute, "rows": schema.row_count}


def schema_from_dict(doc: dict, rows: int | None = None, path=None) -> TableSchema:
    try:
        raw = doc["columns"]
    except (KeyError, TypeError):
        raise DatasetError("schema needs a 'columns' list", path) from None
    columns = []
    for j, c in enumerate(raw):
        try:
            kind = ColumnKind(c["kind"])
            name = str(c["name"])
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"column {j}: needs 'name' and a kind of "
                               f"'categorical' or 'continuous' ({exc})", path) from None
        try:
            if kind is ColumnKind.CATEGORICAL:
                columns.append(Column(j, name, kind, labels=tuple(str(x) for x in c["labels"])))
            else:
                rng = c.get("range")
                columns.append(Column(j, name, kind,
                                      range=None if rng is None else (float(rng[0]),
                                                                      float(rng[1]))))
        except (SchemaError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"column {name!r}: {exc}", path) from None
    n = rows if rows is not None else doc.get("rows")
    if n is None:
        raise DatasetError("schema has no row count and none could be inferred", path)
    try:
        return TableSchema(tuple(columns), int(n), key_attribute=str(doc.get("key", "entity")))
    except SchemaError as exc:
        raise DatasetError(str(exc), path) from None


def load_schema(path, rows: int | None = None) -> TableSchema:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None
    return schema_from_dict(doc, rows, path)


def save_schema(schema: TableSchema, path) -> None:
    Path(path).write_text(json.dumps(schema_to_dict(schema), indent=2) + "\n",
                          encoding="utf-8")


# -- answers / truth ----------------------------------------------------------------


def _rows(path, header: Sequence[str]):
    """Yield (line_number, record) from a CSV file with the given header."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DatasetError("empty file", path, 1) from None
        if [h.strip() for h in first] != list(header):
            raise DatasetError(f"expected header {','.join(header)}", path, 1)
        for rec in reader:
            if not rec or all(not x.strip() for x in rec):
                continue
            if len(rec) != len(header):
                raise DatasetError(f"expected {len(header)} fields, got {len(rec)}", path,
                                   reader.line_num)
            yield reader.line_num, [x.strip() for x in rec]


def _parse_cell(schema: TableSchema, row: str, col: str, path, line):
    try:
        i = int(row)
    except ValueError:
        raise DatasetError(f"row {row!r} is not an integer", path, line) from None
    if not 0 <= i < schema.n_rows:
        raise DatasetError(f"row {i} outside 0..{schema.n_rows - 1}", path, line)
    try:
        column = schema.column(col)
    except InvalidAnswerError:
        raise DatasetError(f"unknown column {col!r}", path, line) from None
    return i, column


def _parse_value(column: Column, text: str, path, line):
    if column.is_categorical:
        try:
            return column.label_index(text)
        except InvalidAnswerError:
            raise DatasetError(f"label {text!r} is not declared for column {column.name!r}",
                               path, line) from None
    try:
        value = float(text)
    except ValueError:
        raise DatasetError(f"value {text!r} in column {column.name!r} is not a number",
                           path, line) from None
    if not math.isfinite(value):
        raise DatasetError(f"non-finite value in column {column.name!r}", path, line)
    return value


def _format_value(column: Column, value) -> str:
    if column.is_categorical:
        return column.labels[int(value)]
    return _fmt(value)


def _max_row(path) -> int:
    top = -1
    for line, rec in _rows_any(path):
        try:
            top = max(top, int(rec[1] if len(rec) == 4 else rec[0]))
        except (ValueError, IndexError):
            raise DatasetError("row is not an integer", path, line) from None
    return top


def _rows_any(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for rec in reader:
            if rec and any(x.strip() for x in rec):
                yield reader.line_num, [x.strip() for x in rec]


def load_answers(path, schema: TableSchema) -> AnswerSet:
    """Answers CSV with header ``worker,row,col,value``.

    ``col`` is the column name; categorical values are label strings that
    must match the schema exactly.
    """
    out = AnswerSet(schema)
    for line, (worker, row, col, text) in _rows(path, ("worker", "row", "col", "value")):
        if not worker:
            raise DatasetError("empty worker id", path, line)
        i, column = _parse_cell(schema, row, col, path, line)
        value = _parse_value(column, text, path, line)
        try:
            out.add(Answer(worker, i, column.index, value))
        except InvalidAnswerError as exc:
            raise DatasetError(str(exc), path, line) from None
    return out


def save_answers(answers: AnswerSet, path) -> None:
    schema = answers.schema
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["worker", "row", "col", "value"])
        for a in answers:
            column = schema.columns[a.col]
            w.writerow([a.worker, a.row, column.name, _format_value(column, a.value)])


def load_truth(path, schema: TableSchema) -> np.ndarray:
    """Truth CSV ``row,col,value`` into an (N, M) array (NaN where absent)."""
    out = np.full((schema.n_rows, schema.n_cols), np.nan)
    seen = set()
    for line, (row, col, text) in _rows(path, ("row", "col", "value")):
        i, column = _parse_cell(schema, row, col, path, line)
        if (i, column.index) in seen:
            raise DatasetError(f"duplicate truth for cell ({i}, {column.name})", path, line)
        seen.add((i, column.index))
        out[i, column.index] = _parse_value(column, text, path, line)
    return out


def save_truth(truth: np.ndarray, schema: TableSchema, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for i in range(schema.n_rows):
            for column in schema.columns:
                v = truth[i, column.index]
                if not np.isnan(v):
                    w.writerow([i, column.name, _format_value(column, v)])


def load_dataset(schema_path, answers_path, truth_path=None):
    """(schema, answers, truth or None).

    A schema without a ``rows`` entry takes its row count from the largest
    row index in the answer (and truth) files.
    """
    doc_path = Path(schema_path)
    try:
        doc = json.loads(doc_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"invalid JSON ({exc.msg})", doc_path, exc.lineno) from None
    rows = None
    if isinstance(doc, dict) and doc.get("rows") is None:
        top = _max_row(answers_path)
        if truth_path is not None:
            top = max(top, _max_row(truth_path))
        rows = top + 1
    schema = schema_from_dict(doc, rows, doc_path)
    answers = load_answers(answers_path, schema)
    truth = load_truth(truth_path, schema) if truth_path is not None else None
    return schema, answers, truth


# -- results -------------------------------------------------------------------------


def save_estimates(estimates: np.ndarray, schema: TableSchema, path,
                   standardized: np.ndarray | None = None) -> None:
    """``row,col,value,value_standardized``; the last field is empty for
    categorical columns and when no standardized values are given."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value", "value_standardized"])
        for i in range(schema.n_rows):
            for column in schema.columns:
                v = estimates[i, column.index]
                if np.isnan(v):
                    continue
                z = ""
                if standardized is not None and not column.is_categorical:
                    z = _fmt(standardized[i, column.index])
                w.writerow([i, column.name, _format_value(column, v), z])


def load_estimates(path, schema: TableSchema) -> np.ndarray:
    out = np.full((schema.n_rows, schema.n_cols), np.nan)
    for line, (row, col, text, _) in _rows(path, ("row", "col", "value",
                                                   "value_standardized")):
        i, column = _parse_cell(schema, row, col, path, line)
        out[i, column.index] = _parse_value(column, text, path, line)
    return out


def save_worker_quality(workers: Sequence, phi: np.ndarray, quality: np.ndarray,
                        counts: Sequence[int], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["worker", "phi", "quality", "answers"])
        for wid, p, q, n in zip(workers, phi, quality, counts):
            w.writerow([wid, _fmt(p), _fmt(q), int(n)])


def save_difficulty(alpha: np.ndarray, beta: np.ndarray, schema: TableSchema, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "index", "name", "difficulty"])
        for i, a in enumerate(alpha):
            w.writerow(["row", i, "", _fmt(a)])
        for column, b in zip(schema.columns, beta):
            w.writerow(["column", column.index, column.name, _fmt(b)])


def save_metrics(rows: Iterable[tuple], path) -> None:
    """Rows of (method, error_rate or None, mnad or None)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "error_rate", "mnad"])
        for method, err, nad in rows:
            w.writerow([method, _fmt(err), _fmt(nad)])


def load_metrics(path) -> list[tuple]:
    out = []
    for _, (method, err, nad) in _rows(path, ("method", "error_rate", "mnad")):
        out.append((method, float(err) if err else None, float(nad) if nad else None))
    return out


CURVE_HEADER = ("seed", "policy", "answers", "answers_per_task", "error_rate", "mnad")


def save_curve(rows: Iterable[tuple], path) -> None:
    """Rows of (seed, policy, CheckpointRecord)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for seed, policy, rec in rows:
            w.writerow([seed, policy, rec.answers, _fmt(rec.answers_per_task),
                        _fmt(rec.error_rate), _fmt(rec.mnad)])
