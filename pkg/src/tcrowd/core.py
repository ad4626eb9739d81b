"""Domain types and the unified worker answer model.

Categorical values are stored as indices into the column's label list;
string labels only appear at the I/O boundary.  Continuous answers are
z-scored per column before inference (see :class:`Standardizer`), so a
single quality window ``epsilon`` is meaningful across columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Hashable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf, erfc

#: q is clamped into [QUALITY_FLOOR, 1 - QUALITY_FLOOR] before taking logs.
QUALITY_FLOOR = 1e-12
DEFAULT_EPSILON = 0.5


class SchemaError(ValueError):
    """Raised for an ill-formed column or table declaration."""


class InvalidAnswerError(ValueError):
    """Raised when an answer does not fit the schema."""


class DuplicateAnswerError(InvalidAnswerError):
    """Raised when a worker answers the same cell twice."""


class ColumnKind(str, Enum):
    CATEGORICAL = "categorical"
    CONTINUOUS = "continuous"


@dataclass(frozen=True)
class Column:
    index: int
    name: str
    kind: ColumnKind
    labels: tuple[str, ...] = ()
    range: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", ColumnKind(self.kind))
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.kind is ColumnKind.CATEGORICAL:
            if len(self.labels) < 2 or len(set(self.labels)) != len(self.labels):
                raise SchemaError(
                    f"categorical column {self.name!r} needs at least 2 distinct labels"
                )
            if self.range is not None:
                raise SchemaError(f"categorical column {self.name!r} cannot carry a range")
        else:
            if self.labels:
                raise SchemaError(f"continuous column {self.name!r} cannot carry labels")
            if self.range is None:
                object.__setattr__(self, "range", (-math.inf, math.inf))
            lo, hi = (float(v) for v in self.range)
            if not lo < hi:
                raise SchemaError(f"continuous column {self.name!r} needs lo < hi")
            object.__setattr__(self, "range", (lo, hi))

    @property
    def is_categorical(self) -> bool:
        return self.kind is ColumnKind.CATEGORICAL

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise InvalidAnswerError(
                f"label {label!r} is not declared for column {self.name!r}"
            ) from None


def categorical(index: int, name: str, labels: Sequence[str]) -> Column:
    return Column(index, name, ColumnKind.CATEGORICAL, labels=tuple(labels))


def continuous(index: int, name: str, lo: float = -math.inf, hi: float = math.inf) -> Column:
    return Column(index, name, ColumnKind.CONTINUOUS, range=(lo, hi))


@dataclass(frozen=True)
class TableSchema:
    columns: tuple[Column, ...]
    row_count: int
    key_attribute: str = "entity"

    def __post_init__(self):
        object.__setattr__(self, "columns", tuple(self.columns))
        if not self.columns:
            raise SchemaError("a table needs at least one column")
        if self.row_count < 1:
            raise SchemaError("a table needs at least one row")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("column names must be unique")
        for j, col in enumerate(self.columns):
            if col.index != j:
                raise SchemaError(f"column {col.name!r} has index {col.index}, expected {j}")

    @property
    def n_rows(self) -> int:
        return self.row_count

    @property
    def n_cols(self) -> int:
        return len(self.columns)

    @property
    def n_cells(self) -> int:
        return self.row_count * len(self.columns)

    @property
    def categorical_mask(self) -> np.ndarray:
        return np.array([c.is_categorical for c in self.columns], dtype=bool)

    @property
    def label_counts(self) -> np.ndarray:
        """|L_j| per column, 0 for continuous columns."""
        return np.array([c.n_labels for c in self.columns], dtype=np.int64)

    @property
    def max_labels(self) -> int:
        return max(2, int(self.label_counts.max()))

    def column(self, key: int | str) -> Column:
        if isinstance(key, str):
            for col in self.columns:
                if col.name == key:
                    return col
            raise InvalidAnswerError(f"unknown column {key!r}")
        return self.columns[key]


@dataclass(frozen=True)
class Answer:
    worker: Hashable
    row: int
    col: int
    value: float


class AnswerSet:
    """The observation multiset with per-cell and per-worker indexes.

    Workers are numbered in order of first appearance unless a pool is
    passed up front; that numbering is the one :class:`ModelParams` uses.
    """

    def __init__(
        self,
        schema: TableSchema,
        answers: Iterable[Answer] = (),
        workers: Iterable[Hashable] = (),
    ):
        self.schema = schema
        self._answers: list[Answer] = []
        self._workers: list[Hashable] = []
        self._worker_pos: dict[Hashable, int] = {}
        self._by_cell: dict[tuple[int, int], list[int]] = {}
        self._by_worker: dict[Hashable, list[int]] = {}
        self._arrays = None
        for w in workers:
            self._register_worker(w)
        for a in answers:
            self.add(a)

    def _register_worker(self, worker):
        if worker not in self._worker_pos:
            self._worker_pos[worker] = len(self._workers)
            self._workers.append(worker)
            self._by_worker[worker] = []

    def validate(self, answer: Answer) -> Answer:
        schema = self.schema
        if not (0 <= answer.row < schema.n_rows):
            raise InvalidAnswerError(f"row {answer.row} out of range")
        if not (0 <= answer.col < schema.n_cols):
            raise InvalidAnswerError(f"column {answer.col} out of range")
        col = schema.columns[answer.col]
        value = answer.value
        if col.is_categorical:
            if isinstance(value, str):
                value = col.label_index(value)
            if float(value) != int(value) or not (0 <= int(value) < col.n_labels):
                raise InvalidAnswerError(
                    f"label index {value} out of range for column {col.name!r}"
                )
            value = int(value)
        else:
            value = float(value)
            if not math.isfinite(value):
                raise InvalidAnswerError(f"non-finite value for column {col.name!r}")
        if value is not answer.value:
            answer = Answer(answer.worker, answer.row, answer.col, value)
        return answer

    def add(self, answer: Answer) -> Answer:
        answer = self.validate(answer)
        key = (answer.row, answer.col)
        for idx in self._by_cell.get(key, ()):
            if self._answers[idx].worker == answer.worker:
                raise DuplicateAnswerError(
                    f"worker {answer.worker!r} already answered cell {key}"
                )
        self._register_worker(answer.worker)
        pos = len(self._answers)
        self._answers.append(answer)
        self._by_cell.setdefault(key, []).append(pos)
        self._by_worker[answer.worker].append(pos)
        self._arrays = None
        return answer

    def copy(self) -> AnswerSet:
        other = AnswerSet(self.schema)
        other._answers = list(self._answers)
        other._workers = list(self._workers)
        other._worker_pos = dict(self._worker_pos)
        other._by_cell = {k: list(v) for k, v in self._by_cell.items()}
        other._by_worker = {k: list(v) for k, v in self._by_worker.items()}
        return other

    def __len__(self) -> int:
        return len(self._answers)

    def __iter__(self) -> Iterator[Answer]:
        return iter(self._answers)

    def __getitem__(self, idx: int) -> Answer:
        return self._answers[idx]

    @property
    def workers(self) -> tuple:
        return tuple(self._workers)

    def worker_position(self, worker) -> int:
        return self._worker_pos[worker]

    def cell_answers(self, row: int, col: int) -> list[Answer]:
        return [self._answers[i] for i in self._by_cell.get((row, col), ())]

    def cell_workers(self, row: int, col: int) -> list:
        """U_ij: the workers who answered cell (row, col)."""
        return [self._answers[i].worker for i in self._by_cell.get((row, col), ())]

    def worker_answers(self, worker) -> list[Answer]:
        return [self._answers[i] for i in self._by_worker.get(worker, ())]

    def has_answered(self, worker, row: int, col: int) -> bool:
        return any(
            self._answers[i].worker == worker for i in self._by_cell.get((row, col), ())
        )

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(worker position, row, col, value) as parallel numpy arrays."""
        if self._arrays is None:
            n = len(self._answers)
            w = np.fromiter((self._worker_pos[a.worker] for a in self._answers), np.int64, n)
            r = np.fromiter((a.row for a in self._answers), np.int64, n)
            c = np.fromiter((a.col for a in self._answers), np.int64, n)
            v = np.fromiter((a.value for a in self._answers), np.float64, n)
            self._arrays = (w, r, c, v)
        return self._arrays


@dataclass(frozen=True)
class CategoricalTruth:
    probs: np.ndarray

    @property
    def mode(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class ContinuousTruth:
    mean: float
    variance: float


TruthDistribution = CategoricalTruth | ContinuousTruth


@dataclass
class TruthTable:
    """Posterior for every cell, stored densely.

    ``probs`` is (N, M, max |L|) with zeros past each column's label count
    (and unused on continuous columns); ``mean``/``var`` are (N, M) and only
    meaningful on continuous columns.
    """

    schema: TableSchema
    probs: np.ndarray
    mean: np.ndarray
    var: np.ndarray

    def cell(self, row: int, col: int) -> TruthDistribution:
        column = self.schema.columns[col]
        if column.is_categorical:
            return CategoricalTruth(self.probs[row, col, : column.n_labels].copy())
        return ContinuousTruth(float(self.mean[row, col]), float(self.var[row, col]))

    def copy(self) -> TruthTable:
        return TruthTable(self.schema, self.probs.copy(), self.mean.copy(), self.var.copy())

    def point_estimates(self) -> np.ndarray:
        """(N, M) argmax label index or posterior mean, in model units.

        ``np.argmax`` returns the first maximum, i.e. ties go to the lowest
        label index.
        """
        est = self.mean.copy()
        cat = self.schema.categorical_mask
        est[:, cat] = np.argmax(self.probs[:, cat, :], axis=-1)
        return est


@dataclass
class ModelParams:
    """Worker variances, row/column difficulties and the continuous priors."""

    workers: tuple
    phi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    epsilon: float = DEFAULT_EPSILON
    prior_mean: np.ndarray = field(default=None)
    prior_var: np.ndarray = field(default=None)

    def __post_init__(self):
        self.workers = tuple(self.workers)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        m = len(self.beta)
        if self.prior_mean is None:
            self.prior_mean = np.zeros(m)
        if self.prior_var is None:
            self.prior_var = np.ones(m)
        self.prior_mean = np.asarray(self.prior_mean, dtype=np.float64)
        self.prior_var = np.asarray(self.prior_var, dtype=np.float64)
        if len(self.phi) != len(self.workers):
            raise ValueError("phi must have one entry per worker")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")
        for name in ("phi", "alpha", "beta", "prior_var"):
            if np.any(~(getattr(self, name) > 0)):
                raise ValueError(f"{name} must be strictly positive")
        self._pos = {w: k for k, w in enumerate(self.workers)}

    @classmethod
    def initial(cls, workers, n_rows, n_cols, epsilon=DEFAULT_EPSILON, **kw) -> ModelParams:
        workers = tuple(workers)
        return cls(workers, np.ones(len(workers)), np.ones(n_rows), np.ones(n_cols),
                   epsilon, **kw)

    def copy(self) -> ModelParams:
        return ModelParams(self.workers, self.phi.copy(), self.alpha.copy(), self.beta.copy(),
                           self.epsilon, self.prior_mean.copy(), self.prior_var.copy())

    def worker_position(self, worker) -> int:
        try:
            return self._pos[worker]
        except KeyError:
            raise IndexError(f"unknown worker {worker!r}") from None

    def vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.alpha, self.beta])


def _checked(arr: np.ndarray, idx: int, what: str):
    if not (0 <= idx < len(arr)):
        raise IndexError(f"{what} {idx} out of range")
    return arr[idx]


def cell_variance(params: ModelParams, worker, row: int, col: int) -> float:
    """phi^u_ij = alpha_i * beta_j * phi_u."""
    phi = params.phi[params.worker_position(worker)]
    return float(_checked(params.alpha, row, "row") * _checked(params.beta, col, "column") * phi)


def quality_from_variance(variance, epsilon):
    """erf(epsilon / sqrt(2 variance)), vectorised."""
    return erf(epsilon / np.sqrt(2.0 * np.asarray(variance, dtype=np.float64)))


def worker_quality(params: ModelParams, worker, row: int, col: int) -> float:
    return float(quality_from_variance(cell_variance(params, worker, row, col), params.epsilon))


def log_quality_pair(variance, epsilon):
    """(ln q, ln(1 - q)) with q clamped away from 0 and 1.

    ``erfc`` keeps ln(1 - q) accurate for very reliable workers.
    """
    x = epsilon / np.sqrt(2.0 * np.asarray(variance, dtype=np.float64))
    q = np.clip(erf(x), QUALITY_FLOOR, 1.0 - QUALITY_FLOOR)
    qc = np.clip(erfc(x), QUALITY_FLOOR, 1.0 - QUALITY_FLOOR)
    return np.log(q), np.log(qc)


def categorical_answer_probs(quality: float, n_labels: int, truth: int) -> np.ndarray:
    """P(a = z | T = truth) over all z."""
    probs = np.full(n_labels, (1.0 - quality) / (n_labels - 1))
    probs[truth] = quality
    return probs


def answer_log_likelihood(
    answer: Answer, truth_value, params: ModelParams, schema: TableSchema
) -> float:
    column = schema.columns[answer.col]
    variance = cell_variance(params, answer.worker, answer.row, answer.col)
    if column.is_categorical:
        if isinstance(truth_value, float) and not float(truth_value).is_integer():
            raise TypeError("categorical truth must be a label index")
        log_q, log_qc = log_quality_pair(variance, params.epsilon)
        if int(answer.value) == int(truth_value):
            return float(log_q)
        return float(log_qc - math.log(column.n_labels - 1))
    diff = float(answer.value) - float(truth_value)
    return -0.5 * math.log(2.0 * math.pi * variance) - diff * diff / (2.0 * variance)


@dataclass(frozen=True)
class Standardizer:
    """Per-column z-scoring of continuous answers (identity on categorical)."""

    center: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, n_cols: int) -> Standardizer:
        return cls(np.zeros(n_cols), np.ones(n_cols))

    @classmethod
    def fit(cls, answers: AnswerSet) -> Standardizer:
        schema = answers.schema
        _, _, cols, values = answers.arrays()
        center = np.zeros(schema.n_cols)
        scale = np.ones(schema.n_cols)
        for j, column in enumerate(schema.columns):
            if column.is_categorical:
                continue
            v = values[cols == j]
            if len(v):
                center[j] = v.mean()
                sd = v.std()
                if sd > 0:
                    scale[j] = sd
        return cls(center, scale)

    def forward(self, cols, values):
        cols = np.asarray(cols)
        return (np.asarray(values, dtype=np.float64) - self.center[cols]) / self.scale[cols]

    def inverse(self, cols, values):
        cols = np.asarray(cols)
        return np.asarray(values, dtype=np.float64) * self.scale[cols] + self.center[cols]


@dataclass
class Observations:
    """Answer arrays in model units, as consumed by inference and assignment."""

    worker: np.ndarray
    row: np.ndarray
    col: np.ndarray
    value: np.ndarray
    n_rows: int
    n_cols: int
    is_cat: np.ndarray
    n_labels: np.ndarray

    @classmethod
    def build(cls, schema: TableSchema, worker, row, col, value) -> Observations:
        col = np.asarray(col, dtype=np.int64)
        return cls(
            np.asarray(worker, dtype=np.int64),
            np.asarray(row, dtype=np.int64),
            col,
            np.asarray(value, dtype=np.float64),
            schema.n_rows,
            schema.n_cols,
            schema.categorical_mask[col],
            schema.label_counts[col],
        )

    @classmethod
    def from_answers(cls, answers: AnswerSet, standardizer: Standardizer) -> Observations:
        w, r, c, v = answers.arrays()
        schema = answers.schema
        cat = schema.categorical_mask[c]
        v = np.where(cat, v, standardizer.forward(c, v))
        return cls.build(schema, w, r, c, v)

    @property
    def cell(self) -> np.ndarray:
        return self.row * self.n_cols + self.col

    def __len__(self) -> int:
        return len(self.value)

    def appended(self, schema: TableSchema, worker: int, row: int, col: int, value: float):
        return Observations.build(
            schema,
            np.append(self.worker, worker),
            np.append(self.row, row),
            np.append(self.col, col),
            np.append(self.value, value),
        )
