"""Synthetic tables, simulated crowds, noise injection and the assignment loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erf

from .assignment import (
    AssignmentConfig,
    Policy,
    TaskExhausted,
    select_tasks,
    state_correlations,
)
from .core import Answer, AnswerSet, Column, ColumnKind, TableSchema
from .inference import InferenceConfig, InferenceState, incremental_update, run_em
from .metrics import error_rate, mnad

log = logging.getLogger(__name__)


@dataclass
class GeneratorConfig:
    rows: int = 50
    cols: int = 10
    cat_ratio: float = 0.5
    mean_difficulty: float = 1.0
    worker_count: int = 30
    # phi_u ~ lognormal(ln(phi_median), phi_log_sd^2), in units of the
    # column's truth variance.
    phi_median: float = 0.3
    phi_log_sd: float = 0.5
    difficulty_log_sd: float = 0.3
    answers_per_task: int = 5
    epsilon: float = 0.5
    label_range: tuple[int, int] = (2, 10)
    domain: tuple[float, float] = (0.0, 1000.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.rows, self.cols, self.worker_count, self.answers_per_task) < 1:
            raise ValueError("counts must be at least 1")
        if not 0.0 <= self.cat_ratio <= 1.0:
            raise ValueError("cat_ratio must lie in [0, 1]")
        if self.answers_per_task > self.worker_count:
            raise ValueError("answers_per_task cannot exceed worker_count")
        if not self.mean_difficulty > 0:
            raise ValueError("mean_difficulty must be positive")


@dataclass
class SyntheticTable:
    schema: TableSchema
    truth: np.ndarray  # (N, M); label index or real value
    alpha: np.ndarray
    beta: np.ndarray
    scale: np.ndarray  # per-column truth standard deviation (1 for categorical)
    epsilon: float


@dataclass
class WorkerPool:
    ids: tuple
    phi: np.ndarray

    def quality(self, epsilon: float) -> np.ndarray:
        return erf(epsilon / np.sqrt(2.0 * self.phi))


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def generate_table(config: GeneratorConfig) -> SyntheticTable:
    """Random schema, ground truth and row/column difficulties.

    floor(R*M) columns are categorical with |L| ~ U{lo..hi}; the rest are
    continuous on the configured domain.  Difficulties are log-normal and
    rescaled so that mean(alpha_i * beta_j) equals ``mean_difficulty``.
    """
    rng = _rng(config.seed, 0)
    m = config.cols
    n_cat = int(math.floor(config.cat_ratio * m + 1e-9))
    kinds = np.array([True] * n_cat + [False] * (m - n_cat))
    kinds = kinds[rng.permutation(m)]
    lo_l, hi_l = config.label_range
    lo_d, hi_d = config.domain
    columns = []
    truth = np.empty((config.rows, m))
    scale = np.ones(m)
    for j in range(m):
        if kinds[j]:
            n_labels = int(rng.integers(lo_l, hi_l + 1))
            columns.append(Column(j, f"cat{j}", ColumnKind.CATEGORICAL,
                                  labels=tuple(f"L{k}" for k in range(n_labels))))
            truth[:, j] = rng.integers(0, n_labels, config.rows)
        else:
            columns.append(Column(j, f"num{j}", ColumnKind.CONTINUOUS, range=(lo_d, hi_d)))
            truth[:, j] = rng.uniform(lo_d, hi_d, config.rows)
            scale[j] = (hi_d - lo_d) / math.sqrt(12.0)
    alpha = rng.lognormal(0.0, config.difficulty_log_sd, config.rows)
    beta = rng.lognormal(0.0, config.difficulty_log_sd, m)
    alpha *= config.mean_difficulty / (alpha.mean() * beta.mean())
    schema = TableSchema(tuple(columns), config.rows, key_attribute="entity")
    return SyntheticTable(schema, truth, alpha, beta, scale, config.epsilon)


def generate_workers(config: GeneratorConfig) -> WorkerPool:
    rng = _rng(config.seed, 1)
    phi = rng.lognormal(math.log(config.phi_median), config.phi_log_sd, config.worker_count)
    return WorkerPool(tuple(f"w{k:03d}" for k in range(config.worker_count)), phi)


def sample_answers(rng, table: SyntheticTable, phi, rows, cols) -> np.ndarray:
    """Draw answers for parallel arrays of (worker phi, row, col).

    Continuous: truth + N(0, alpha*beta*phi) in truth-scale units.
    Categorical: the truth with probability erf(eps / sqrt(2 v)), otherwise
    a uniformly chosen wrong label.
    """
    phi = np.asarray(phi, dtype=np.float64)
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    var = table.alpha[rows] * table.beta[cols] * phi
    truth = table.truth[rows, cols]
    cat = table.schema.categorical_mask[cols]
    n_labels = table.schema.label_counts[cols]
    noise = rng.standard_normal(len(var))
    u = rng.random(len(var))
    shift = rng.integers(1, np.maximum(n_labels, 2))
    q = erf(table.epsilon / np.sqrt(2.0 * var))
    wrong = np.mod(truth + shift, np.maximum(n_labels, 1))
    cat_answer = np.where(u < q, truth, wrong)
    cont_answer = truth + noise * np.sqrt(var) * table.scale[cols]
    return np.where(cat, cat_answer, cont_answer)


class SyntheticCrowd:
    """Every worker's answer to every cell, drawn once up front.

    Two policies replayed on the same crowd therefore see the same answer
    whenever they ask the same worker about the same cell.
    """

    def __init__(self, table: SyntheticTable, workers: WorkerPool, seed: int):
        self.table = table
        self.workers = workers
        n, m = table.truth.shape
        w = len(workers.ids)
        ww, rr, cc = np.meshgrid(np.arange(w), np.arange(n), np.arange(m), indexing="ij")
        rng = _rng(seed, 2)
        self.responses = sample_answers(
            rng, table, workers.phi[ww.ravel()], rr.ravel(), cc.ravel()
        ).reshape(w, n, m)
        self._pos = {wid: k for k, wid in enumerate(workers.ids)}

    def respond(self, worker, row: int, col: int) -> Answer:
        value = float(self.responses[self._pos[worker], row, col])
        if self.table.schema.columns[col].is_categorical:
            return Answer(worker, row, col, int(value))
        return Answer(worker, row, col, value)


def generate_answers(table: SyntheticTable, workers: WorkerPool,
                     config: GeneratorConfig) -> AnswerSet:
    """Uniform allocation: every row goes to ``answers_per_task`` distinct
    workers, each answering every cell of that row."""
    rng = _rng(config.seed, 3)
    schema = table.schema
    n, m = schema.n_rows, schema.n_cols
    k = config.answers_per_task
    picks = np.stack([rng.choice(len(workers.ids), k, replace=False) for _ in range(n)])
    w = np.repeat(picks, m, axis=1).ravel()
    r = np.repeat(np.arange(n), k * m)
    c = np.tile(np.arange(m), n * k)
    values = sample_answers(rng, table, workers.phi[w], r, c)
    out = AnswerSet(schema, workers=workers.ids)
    cat = schema.categorical_mask
    for wi, ri, ci, v in zip(w, r, c, values):
        out.add(Answer(workers.ids[wi], int(ri), int(ci), int(v) if cat[ci] else float(v)))
    return out


def generate_dataset(config: GeneratorConfig):
    """(table, workers, answers) for one seed."""
    table = generate_table(config)
    workers = generate_workers(config)
    return table, workers, generate_answers(table, workers, config)


# -- noise ---------------------------------------------------------------------


@dataclass
class NoiseConfig:
    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


def perturb_continuous(value: float, mean: float, std: float, draw: float) -> float:
    """z-score ``value``, add ``draw`` and map back to the original scale."""
    if not std > 0:
        # A constant column has no scale of its own; the draw is added as is.
        return value + draw
    return mean + ((value - mean) / std + draw) * std


def inject_noise(answers: AnswerSet, config: NoiseConfig) -> AnswerSet:
    """Perturb ceil(|A| * gamma) answers picked uniformly with replacement.

    Categorical picks get a label drawn uniformly from the column's label
    set; continuous picks get N(0, 1) noise added on the z-score scale of
    the column's original answers.  An answer picked twice is perturbed
    twice.  Order and worker list are preserved.
    """
    schema = answers.schema
    n = len(answers)
    values = [a.value for a in answers]
    picks = int(math.ceil(n * config.gamma - 1e-12)) if n else 0
    if picks:
        rng = _rng(config.seed, 4)
        _, _, cols, raw = answers.arrays()
        mean = np.zeros(schema.n_cols)
        std = np.zeros(schema.n_cols)
        for j in range(schema.n_cols):
            v = raw[cols == j]
            if len(v):
                mean[j], std[j] = v.mean(), v.std()
        for idx in rng.integers(0, n, picks):
            j = int(cols[idx])
            column = schema.columns[j]
            if column.is_categorical:
                values[idx] = int(rng.integers(0, column.n_labels))
            else:
                values[idx] = perturb_continuous(float(values[idx]), mean[j], std[j],
                                                 float(rng.standard_normal()))
    out = AnswerSet(schema, workers=answers.workers)
    for a, v in zip(answers, values):
        out.add(Answer(a.worker, a.row, a.col, v))
    return out


# -- assignment loop -------------------------------------------------------------


@dataclass(frozen=True)
class CheckpointRecord:
    answers: int
    answers_per_task: float
    error_rate: float | None
    mnad: float | None


def simulation_inference_config(**overrides) -> InferenceConfig:
    """Inference settings for assignment runs.

    Runs pass through states with one or two answers per cell, where the
    plain likelihood is singular (a worker or row variance can shrink to
    zero around its own answers); weak log-normal shrinkage keeps those
    states well posed.
    """
    kw = dict(difficulty_prior_sd=0.5, phi_prior_sd=1.0)
    kw.update(overrides)
    return InferenceConfig(**kw)


@dataclass
class SimulationConfig:
    budget: int
    assignment: AssignmentConfig = field(default_factory=AssignmentConfig)
    inference: InferenceConfig = field(default_factory=simulation_inference_config)
    initial_answers: int = 1
    checkpoint_every: float = 0.5  # average answers per task
    stop_at: tuple | None = None  # (error_rate, mnad) targets for an early stop
    arrival: Sequence | None = None  # worker ids, cycled; round-robin when None

    def __post_init__(self):
        if self.budget < 1:
            raise ValueError("budget must be at least 1 answer")
        if self.initial_answers < 0:
            raise ValueError("initial_answers cannot be negative")
        if not self.checkpoint_every > 0:
            raise ValueError("checkpoint_every must be positive")


@dataclass
class SimulationRun:
    budget: int
    checkpoint_every: float
    policy: str
    records: list = field(default_factory=list)
    stopped_early: bool = False
    final_state: InferenceState | None = None

    def answers_to_reach(self, max_error: float | None, max_mnad: float | None):
        """Answers collected at the first checkpoint meeting both targets, or None."""
        for r in self.records:
            ok_e = max_error is None or r.error_rate is None or r.error_rate <= max_error
            ok_m = max_mnad is None or r.mnad is None or r.mnad <= max_mnad
            if ok_e and ok_m:
                return r.answers
        return None


def _arrivals(workers: Sequence) -> Iterator:
    while True:
        yield from workers


def _seed_answers(crowd: SyntheticCrowd, budget: int, per_task: int) -> list[Answer]:
    """Row i goes to workers (i * per_task + r) mod W, each answering the whole row."""
    schema = crowd.table.schema
    ids = crowd.workers.ids
    out = []
    for i in range(schema.n_rows):
        for r in range(per_task):
            w = ids[(i * per_task + r) % len(ids)]
            for j in range(schema.n_cols):
                out.append(crowd.respond(w, i, j))
    return out[:budget]


def evaluate_state(state: InferenceState, truth: np.ndarray):
    est = state.estimates()
    return (error_rate(est, truth, state.schema), mnad(est, truth, state.answers, state.schema))


def run_simulation(crowd: SyntheticCrowd, config: SimulationConfig) -> SimulationRun:
    """Replay worker arrivals, assigning tasks with the configured policy.

    Answers are ingested with ``incremental_update``; a full (warm-started)
    EM run and a metric record happen every ``checkpoint_every`` answers per
    task and at the end.  The run stops early when the budget is spent, the
    ``stop_at`` targets are met, or no arriving worker has anything left.
    """
    table = crowd.table
    schema = table.schema
    acfg = config.assignment
    icfg = config.inference
    run = SimulationRun(config.budget, config.checkpoint_every, acfg.policy.value)
    answers = AnswerSet(schema, workers=crowd.workers.ids)
    for a in _seed_answers(crowd, config.budget, config.initial_answers):
        answers.add(a)
    if len(answers) == 0:
        # No seeding: start from one answer so inference has something to fit.
        answers.add(crowd.respond(crowd.workers.ids[0], 0, 0))
    step = config.checkpoint_every * schema.n_cells
    state = run_em(answers, schema, icfg)
    model = state_correlations(state) if acfg.policy is Policy.STRUCTURE_AWARE_IG else None

    def checkpoint():
        err, nad = evaluate_state(state, table.truth)
        run.records.append(CheckpointRecord(len(state.answers),
                                            len(state.answers) / schema.n_cells, err, nad))
        return err, nad

    def reached(err, nad):
        if config.stop_at is None:
            return False
        max_err, max_nad = config.stop_at
        return ((err is None or err <= max_err) and (nad is None or nad <= max_nad))

    metrics = checkpoint()
    next_mark = (math.floor(len(state.answers) / step + 1e-9) + 1) * step
    arrival = _arrivals(list(config.arrival) if config.arrival else crowd.workers.ids)
    exhausted: set = set()
    pool = set(config.arrival) if config.arrival else set(crowd.workers.ids)
    while len(state.answers) < config.budget and not reached(*metrics):
        if exhausted >= pool:
            run.stopped_early = True
            log.info("every worker exhausted at %d answers", len(state.answers))
            break
        worker = next(arrival)
        if worker in exhausted:
            continue
        k = min(acfg.batch_k, config.budget - len(state.answers))
        try:
            cells = select_tasks(state, model, worker,
                                 AssignmentConfig(acfg.policy, acfg.s_cont, k, acfg.seed))
        except TaskExhausted:
            exhausted.add(worker)
            continue
        state = incremental_update(state, [crowd.respond(worker, i, j) for i, j in cells], icfg)
        if len(state.answers) >= next_mark - 1e-9 and len(state.answers) < config.budget:
            state = run_em(state.answers, schema, icfg, warm_start=state)
            if model is not None:
                model = state_correlations(state)
            metrics = checkpoint()
            next_mark += step
    if run.records[-1].answers != len(state.answers):
        state = run_em(state.answers, schema, icfg, warm_start=state)
        checkpoint()
    run.final_state = state
    return run
