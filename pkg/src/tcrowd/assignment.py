"""Online task selection by uniform entropy and expected information gain.

Gains are measured on the model scale: continuous columns are compared in
the standardized units used by inference, categorical columns in nats over
their label set.  The hypothetical posterior after one more answer is the
one :func:`tcrowd.inference.incremental_update` produces (the touched cell
is refreshed under the current parameters), which has a closed form; the
vectorised scorers below use it directly and the scalar ``*_gain``
functions route through ``incremental_update`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import erf, erfc, ndtr, ndtri, xlogy

from .core import (
    QUALITY_FLOOR,
    Answer,
    AnswerSet,
    CategoricalTruth,
    ContinuousTruth,
    TruthDistribution,
)
from .inference import InferenceState, incremental_update

_LOG_2PI_E = math.log(2.0 * math.pi * math.e)


class TaskExhausted(LookupError):
    """The worker has no eligible cell left."""


class Policy(str, Enum):
    RANDOM = "random"
    LOOPING = "looping"
    ENTROPY = "entropy"
    INHERENT_IG = "iig"
    STRUCTURE_AWARE_IG = "saig"


@dataclass
class AssignmentConfig:
    policy: Policy = Policy.STRUCTURE_AWARE_IG
    s_cont: int = 10
    batch_k: int = 1
    seed: int = 0

    def __post_init__(self):
        self.policy = Policy(self.policy)
        if self.s_cont < 2:
            raise ValueError("s_cont must be at least 2")
        if self.batch_k < 1:
            raise ValueError("batch_k must be at least 1")


# -- entropy --------------------------------------------------------------------


def uniform_entropy(truth: TruthDistribution) -> float:
    """Shannon entropy (categorical) or differential entropy (continuous), in nats."""
    if isinstance(truth, CategoricalTruth):
        p = np.asarray(truth.probs, dtype=np.float64)
        return float(-np.sum(xlogy(p, p)))
    if not truth.variance > 0:
        raise ValueError("continuous truth needs a positive variance")
    return 0.5 * (_LOG_2PI_E + math.log(truth.variance))


def entropy_table(state: InferenceState) -> np.ndarray:
    """(N, M) uniform entropy of every cell."""
    t = state.truths
    with np.errstate(divide="ignore"):
        cont = 0.5 * (_LOG_2PI_E + np.log(t.var))
    shannon = -np.sum(xlogy(t.probs, t.probs), axis=-1)
    return np.where(state.schema.categorical_mask[None, :], shannon, cont)


def discretized_entropy(mean: float, variance: float, width: float, span: float = 12.0) -> float:
    """Shannon entropy of a normal binned with the given width.

    Bins are aligned on multiples of ``width`` and cover ``span`` standard
    deviations either side of the mean.
    """
    sd = math.sqrt(variance)
    lo = math.floor((mean - span * sd) / width)
    hi = math.ceil((mean + span * sd) / width)
    edges = np.arange(lo, hi + 1) * width
    p = np.diff(ndtr((edges - mean) / sd))
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


# -- answer models ----------------------------------------------------------------


@dataclass(frozen=True)
class CategoricalAnswerModel:
    """Worker answers the estimated label with probability ``quality``,
    otherwise one of the other labels uniformly."""

    quality: float
    n_labels: int
    center: int

    def probs(self) -> np.ndarray:
        out = np.full(self.n_labels, (1.0 - self.quality) / (self.n_labels - 1))
        out[self.center] = self.quality
        return out


@dataclass(frozen=True)
class ContinuousAnswerModel:
    """Answer = center + e with e a normal mixture (one component for the
    inherent model).  Units are the model's standardized scale."""

    center: float
    weights: tuple
    means: tuple
    variances: tuple

    @property
    def second_moment(self) -> float:
        """E[e^2], the spread about the center used as the noise variance."""
        w = np.asarray(self.weights)
        return float(np.sum(w * (np.square(self.means) + np.asarray(self.variances))))

    def cdf(self, x):
        sd = np.sqrt(np.asarray(self.variances))
        z = (np.subtract.outer(np.atleast_1d(x) - self.center, self.means)) / sd
        return np.sum(np.asarray(self.weights) * ndtr(z), axis=-1)

    def quantiles(self, s: int) -> np.ndarray:
        """``s`` equi-probability samples: the (k + 1/2)/s quantiles."""
        levels = (np.arange(s) + 0.5) / s
        if len(self.weights) == 1:
            return self.center + self.means[0] + math.sqrt(self.variances[0]) * ndtri(levels)
        sd = np.sqrt(np.asarray(self.variances))
        lo = self.center + min(np.asarray(self.means) - 10 * sd)
        hi = self.center + max(np.asarray(self.means) + 10 * sd)
        return np.array([brentq(lambda x, p=p: self.cdf(x)[0] - p, lo, hi, xtol=1e-12)
                         for p in levels])


AnswerModel = CategoricalAnswerModel | ContinuousAnswerModel


def _worker_variance(state: InferenceState, worker, row, col):
    params = state.params
    if worker in params.workers:
        phi = params.phi[params.worker_position(worker)]
    else:
        phi = float(np.median(params.phi)) if len(params.phi) else 1.0
    return params.alpha[row] * params.beta[col] * phi


def inherent_answer_model(state: InferenceState, cell, worker) -> AnswerModel:
    """The worker model centred on the current estimate of the cell."""
    i, j = cell
    v = _worker_variance(state, worker, i, j)
    column = state.schema.columns[j]
    if column.is_categorical:
        q = float(erf(state.params.epsilon / math.sqrt(2.0 * v)))
        center = int(np.argmax(state.truths.probs[i, j, : column.n_labels]))
        return CategoricalAnswerModel(q, column.n_labels, center)
    return ContinuousAnswerModel(float(state.truths.mean[i, j]), (1.0,), (0.0,), (float(v),))


# -- posterior update -------------------------------------------------------------


def _clamped_factors(quality, n_labels):
    """(ln q, ln((1-q)/(L-1))) with the same floor the E-step applies."""
    q = np.maximum(quality, QUALITY_FLOOR)
    qc = np.maximum(1.0 - quality, QUALITY_FLOOR)
    return np.log(q), np.log(qc) - np.log(n_labels - 1.0)


def updated_truth(truth: TruthDistribution, value, model: AnswerModel) -> TruthDistribution:
    """Posterior after one more answer whose likelihood follows ``model``.

    Continuous values are on the model (standardized) scale.
    """
    if isinstance(truth, CategoricalTruth):
        p = np.asarray(truth.probs, dtype=np.float64)
        lq, lw = _clamped_factors(model.quality, len(p))
        logp = np.log(p, out=np.full_like(p, -np.inf), where=p > 0) + lw
        logp[int(value)] += lq - lw
        logp -= np.max(logp)
        post = np.exp(logp)
        return CategoricalTruth(post / post.sum())
    v = model.second_moment
    prec = 1.0 / truth.variance + 1.0 / v
    var = 1.0 / prec
    return ContinuousTruth((truth.mean / truth.variance + value / v) * var, var)


def _expected_posterior_entropy(truth, model, s_cont):
    if isinstance(truth, CategoricalTruth):
        weights = model.probs()
        h = [uniform_entropy(updated_truth(truth, z, model)) for z in range(len(weights))]
        return float(np.dot(weights, h))
    samples = model.quantiles(s_cont)
    return float(np.mean([uniform_entropy(updated_truth(truth, x, model)) for x in samples]))


def inherent_gain(state: InferenceState, cell, worker, config: AssignmentConfig | None = None
                  ) -> float:
    """H(T_ij) minus its expectation after one more answer from ``worker``.

    Each hypothetical answer is ingested with ``incremental_update``; the
    expectation enumerates every label (categorical) or ``s_cont``
    equi-probability quantiles of the worker's normal answer model.
    """
    config = config or AssignmentConfig(policy=Policy.INHERENT_IG)
    i, j = cell
    if state.answers.has_answered(worker, i, j):
        raise ValueError(f"worker {worker!r} already answered cell {cell}")
    model = inherent_answer_model(state, cell, worker)
    before = uniform_entropy(state.truths.cell(i, j))
    column = state.schema.columns[j]
    if column.is_categorical:
        weights = model.probs()
        values = list(range(column.n_labels))
    else:
        weights = np.full(config.s_cont, 1.0 / config.s_cont)
        z = model.quantiles(config.s_cont)
        values = [float(x) for x in state.standardizer.inverse(j, z)]
    after = 0.0
    for w, value in zip(weights, values):
        nxt = incremental_update(state, Answer(worker, i, j, value))
        after += w * uniform_entropy(nxt.truths.cell(i, j))
    return before - after


# -- correlations -----------------------------------------------------------------


@dataclass
class CorrelationModel:
    """Pairwise error correlations and fitted error distributions.

    For an ordered pair (j, k) the meaning of the pair arrays depends on the
    column kinds:

    * cat j | cat k: ``p_r``/``p_w`` = P(e_j = 1 | e_k = 0 / 1);
    * cont j | cont k: bivariate normal ``mean_j, mean_k, sd_j, sd_k, rho``;
    * cont j | cat k: e_j ~ N(``mu_r``, ``var_r``) when e_k = 0, N(``mu_w``,
      ``var_w``) when e_k = 1;
    * cat j | cont k: e_k ~ N(``mu_r``, ``var_r``) when e_j = 0, N(``mu_w``,
      ``var_w``) when e_j = 1, with ``pair_p`` = P(e_j = 1) on the pairs.

    ``present[j, k]`` is False where the data could not support a fit.
    Continuous errors are on the scale they were supplied in.
    """

    W: np.ndarray
    is_cat: np.ndarray
    marginal_p: np.ndarray
    marginal_mean: np.ndarray
    marginal_var: np.ndarray
    present: np.ndarray
    p_r: np.ndarray
    p_w: np.ndarray
    mu_r: np.ndarray
    var_r: np.ndarray
    mu_w: np.ndarray
    var_w: np.ndarray
    pair_p: np.ndarray
    mean_j: np.ndarray
    mean_k: np.ndarray
    sd_j: np.ndarray
    sd_k: np.ndarray
    rho: np.ndarray
    n_pairs: np.ndarray = field(default=None)

    @classmethod
    def independent(cls, is_cat) -> CorrelationModel:
        """No correlations at all: every structure-aware query falls back."""
        is_cat = np.asarray(is_cat, dtype=bool)
        m = len(is_cat)
        nan = np.full((m, m), np.nan)
        return cls(np.eye(m), is_cat, np.full(m, np.nan), np.full(m, np.nan),
                   np.full(m, np.nan), np.zeros((m, m), bool),
                   *(nan.copy() for _ in range(12)), np.zeros((m, m), np.int64))

    @property
    def n_cols(self) -> int:
        return len(self.is_cat)

    def conditional(self, j: int, k: int, x: float):
        """P(e_j | e_k = x) as ("bernoulli", p_err) or ("normal", mean, var),
        or None when the pair has no fitted conditional."""
        if j == k or not self.present[j, k] or not np.isfinite(x):
            return None
        p_err, mean, var = _conditional_arrays(self, j, k, np.asarray(float(x)))
        if self.is_cat[j]:
            return ("bernoulli", float(p_err))
        return ("normal", float(mean), float(var))


def _normal_pdf(x, mu, var):
    return np.exp(-0.5 * (x - mu) ** 2 / var) / np.sqrt(2.0 * math.pi * var)


def _conditional_arrays(model: CorrelationModel, j, k, x):
    """Broadcast evaluation of P(e_j | e_k = x) for index arrays j, k.

    Returns (p_err, mean, var); entries that do not apply are NaN.
    """
    cj = model.is_cat[j]
    ck = model.is_cat[k]
    x = np.asarray(x, dtype=np.float64)
    wrong = x >= 0.5
    # cat | cat
    p_cc = np.where(wrong, model.p_w[j, k], model.p_r[j, k])
    # cat | cont, Bayes inversion of the split normals of e_k
    pj = model.pair_p[j, k]
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        lw = pj * _normal_pdf(x, model.mu_w[j, k], model.var_w[j, k])
        lr = (1.0 - pj) * _normal_pdf(x, model.mu_r[j, k], model.var_r[j, k])
        p_ck = np.where(lw + lr > 0, lw / (lw + lr), pj)
        # cont | cont
        rho = model.rho[j, k]
        m_bb = model.mean_j[j, k] + model.sd_j[j, k] / model.sd_k[j, k] * rho * (
            x - model.mean_k[j, k])
        v_bb = (1.0 - rho * rho) * model.sd_j[j, k] ** 2
    # cont | cat
    m_kc = np.where(wrong, model.mu_w[j, k], model.mu_r[j, k])
    v_kc = np.where(wrong, model.var_w[j, k], model.var_r[j, k])
    p_err = np.where(cj, np.where(ck, p_cc, p_ck), np.nan)
    mean = np.where(cj, np.nan, np.where(ck, m_kc, m_bb))
    var = np.where(cj, np.nan, np.where(ck, v_kc, v_bb))
    return p_err, mean, var


def _pearson(a, b):
    da = a - a.mean()
    db = b - b.mean()
    den = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if not den > 0:
        return 0.0
    return float(np.clip(np.dot(da, db) / den, -1.0, 1.0))


def _split_normal(values, mask, min_support):
    sel = values[mask]
    if len(sel) < min_support:
        return None
    var = float(sel.var())
    if not var > 0:
        return None
    return float(sel.mean()), var


def fit_correlations_from_errors(errors: np.ndarray, is_cat, min_support: int = 2
                                 ) -> CorrelationModel:
    """Fit the correlation model from a (samples, M) error matrix.

    Each row holds one worker's errors on one table row (NaN where that
    worker did not answer the column).  Categorical errors are 0/1.
    """
    errors = np.asarray(errors, dtype=np.float64)
    is_cat = np.asarray(is_cat, dtype=bool)
    m = errors.shape[1]
    model = CorrelationModel.independent(is_cat)
    have = ~np.isnan(errors)
    model.n_pairs = (have.T.astype(np.int64) @ have.astype(np.int64))
    zero_var = np.zeros(m, bool)
    for j in range(m):
        col = errors[have[:, j], j]
        if len(col) < min_support or not col.var() > 0:
            zero_var[j] = True
        if len(col) == 0:
            continue
        if is_cat[j]:
            model.marginal_p[j] = col.mean()
        else:
            model.marginal_mean[j] = col.mean()
            model.marginal_var[j] = col.var()
    for j in range(m):
        for k in range(m):
            if j == k:
                continue
            both = have[:, j] & have[:, k]
            if both.sum() < min_support or zero_var[j] or zero_var[k]:
                model.W[j, k] = 0.0
                continue
            ej = errors[both, j]
            ek = errors[both, k]
            if not (ej.var() > 0 and ek.var() > 0):
                model.W[j, k] = 0.0
                continue
            model.W[j, k] = _pearson(ej, ek)
            ok = False
            if is_cat[j] and is_cat[k]:
                r, w = ek < 0.5, ek >= 0.5
                if r.sum() >= min_support and w.sum() >= min_support:
                    model.p_r[j, k] = ej[r].mean()
                    model.p_w[j, k] = ej[w].mean()
                    ok = True
            elif not is_cat[j] and not is_cat[k]:
                rho = model.W[j, k]
                if abs(rho) < 1.0:
                    model.mean_j[j, k], model.mean_k[j, k] = ej.mean(), ek.mean()
                    model.sd_j[j, k], model.sd_k[j, k] = ej.std(), ek.std()
                    model.rho[j, k] = rho
                    ok = True
            else:
                # The normal side is split on the categorical side.
                normal, split = (ej, ek) if not is_cat[j] else (ek, ej)
                r = _split_normal(normal, split < 0.5, min_support)
                w = _split_normal(normal, split >= 0.5, min_support)
                if r is not None and w is not None:
                    model.mu_r[j, k], model.var_r[j, k] = r
                    model.mu_w[j, k], model.var_w[j, k] = w
                    if is_cat[j]:
                        model.pair_p[j, k] = ej.mean()
                    ok = True
            model.present[j, k] = ok
    return model


def error_matrix(answers: AnswerSet, estimates: np.ndarray, scale=None):
    """Errors of every answer against ``estimates``, one row per (worker, row).

    Returns (errors, keys) with ``keys[r] = (worker_position, row)``.
    Continuous errors are divided by ``scale`` (per column) when given.
    """
    schema = answers.schema
    w, r, c, v = answers.arrays()
    m = schema.n_cols
    est = np.asarray(estimates, dtype=np.float64)[r, c]
    is_cat = schema.categorical_mask[c]
    err = np.where(is_cat, (v != est).astype(np.float64), v - est)
    if scale is not None:
        err = np.where(is_cat, err, err / np.asarray(scale, dtype=np.float64)[c])
    key = w.astype(np.int64) * schema.n_rows + r
    uniq, inv = np.unique(key, return_inverse=True)
    out = np.full((len(uniq), m), np.nan)
    out[inv, c] = err
    keys = np.stack([uniq // schema.n_rows, uniq % schema.n_rows], axis=1)
    return out, keys


def fit_correlations(answers: AnswerSet, estimates: np.ndarray, scale=None,
                     min_support: int = 2) -> CorrelationModel:
    """Correlation model from answers and point estimates of the truth.

    Pairs are answers by the same worker on the same row.  ``scale``
    divides continuous errors (pass the standardizer's scale to work on the
    model scale).
    """
    errors, _ = error_matrix(answers, estimates, scale)
    return fit_correlations_from_errors(errors, answers.schema.categorical_mask, min_support)


def state_correlations(state: InferenceState, min_support: int = 2) -> CorrelationModel:
    """Correlation model on the model scale of an inference snapshot."""
    return fit_correlations(state.answers, state.estimates(), state.standardizer.scale,
                            min_support)


def worker_row_errors(state: InferenceState, worker) -> np.ndarray:
    """(N, M) model-scale errors of ``worker`` against the current estimates."""
    schema = state.schema
    out = np.full((schema.n_rows, schema.n_cols), np.nan)
    answers = state.answers.worker_answers(worker) if worker in state.answers.workers else []
    if not answers:
        return out
    est = state.truths.point_estimates()
    for a in answers:
        if schema.columns[a.col].is_categorical:
            out[a.row, a.col] = float(int(a.value) != int(est[a.row, a.col]))
        else:
            z = float(state.standardizer.forward(a.col, a.value))
            out[a.row, a.col] = z - est[a.row, a.col]
    return out


# -- structure-aware answer distribution --------------------------------------------


def _mixture_parts(model: CorrelationModel, j: int, observed: dict):
    weights, parts = [], []
    for k, x in sorted(observed.items()):
        comp = model.conditional(j, k, x)
        if comp is None:
            continue
        weights.append(float(model.W[j, k]))
        parts.append(comp)
    return weights, parts


def conditional_error_distribution(model: CorrelationModel, j: int, observed: dict):
    """Linear mixture of P(e_j | e_k = x_k) over observed columns.

    ``observed`` maps column k to the worker's error on it.  Returns
    ("bernoulli", p_err) or ("normal", weights, means, variances), or None
    when the weights do not support a mixture (nothing observed, no fitted
    conditional, or a non-positive weight total).
    """
    weights, parts = _mixture_parts(model, j, {k: x for k, x in observed.items() if k != j})
    total = sum(weights)
    if not parts or not total > 0:
        return None
    w = np.asarray(weights) / total
    if model.is_cat[j]:
        p = float(np.clip(np.dot(w, [c[1] for c in parts]), 0.0, 1.0))
        return ("bernoulli", p)
    means = tuple(c[1] for c in parts)
    variances = tuple(max(c[2], 1e-300) for c in parts)
    second = float(np.dot(w, np.square(means) + np.asarray(variances)))
    if not second > 0:
        return None
    return ("normal", tuple(w), means, variances)


def conditional_answer_distribution(state: InferenceState, model: CorrelationModel, cell,
                                    worker) -> AnswerModel:
    """The worker's answer model for ``cell`` given their errors elsewhere in the row.

    Falls back to :func:`inherent_answer_model` when the worker has no other
    answer in the row or the mixture weights are not usable.
    """
    i, j = cell
    errs = worker_row_errors(state, worker)[i]
    observed = {k: float(x) for k, x in enumerate(errs) if k != j and np.isfinite(x)}
    base = inherent_answer_model(state, cell, worker)
    if not observed:
        return base
    mix = conditional_error_distribution(model, j, observed)
    if mix is None:
        return base
    if mix[0] == "bernoulli":
        return CategoricalAnswerModel(1.0 - mix[1], base.n_labels, base.center)
    _, w, means, variances = mix
    return ContinuousAnswerModel(base.center, w, means, variances)


def structure_aware_gain(state: InferenceState, model: CorrelationModel, cell, worker,
                         config: AssignmentConfig | None = None) -> float:
    """Inherent gain with the worker's answer model replaced by the
    correlation-conditioned one.

    The conditioned model supplies both the distribution of the hypothetical
    answer and its likelihood in the posterior update (for a continuous cell
    the mixture's second moment about the estimate is the noise variance).
    With no usable conditional this is exactly :func:`inherent_gain`.
    """
    config = config or AssignmentConfig()
    answer_model = conditional_answer_distribution(state, model, cell, worker)
    if answer_model == inherent_answer_model(state, cell, worker):
        return inherent_gain(state, cell, worker, config)
    i, j = cell
    truth = state.truths.cell(i, j)
    return uniform_entropy(truth) - _expected_posterior_entropy(truth, answer_model,
                                                                config.s_cont)


# -- vectorised scoring ------------------------------------------------------------


def _categorical_gain(probs, n_labels, center, quality):
    """Vectorised expected entropy drop for categorical cells.

    probs (C, L) zero-padded, center (C,), quality (C,) in (0, 1].
    """
    c, lmax = probs.shape
    valid = np.arange(lmax)[None, :] < n_labels[:, None]
    lq, lw = _clamped_factors(quality, n_labels.astype(np.float64))
    before = -np.sum(xlogy(probs, probs), axis=1)
    # post[c, a, z] over hypothetical answer a and truth z
    base = probs * np.exp(lw)[:, None]
    post = np.repeat(base[:, None, :], lmax, axis=1)
    diag = np.arange(lmax)
    post[:, diag, diag] = probs * np.exp(lq)[:, None]
    post /= np.maximum(post.sum(axis=2, keepdims=True), 1e-300)
    h_after = -np.sum(xlogy(post, post), axis=2)
    wrong = (1.0 - quality) / np.maximum(n_labels - 1, 1)
    weights = np.where(valid, wrong[:, None], 0.0)
    weights[np.arange(c), center] = quality
    return before - np.sum(weights * h_after, axis=1)


def _continuous_gain(var, noise_var):
    return 0.5 * np.log1p(var / noise_var)


def _worker_cell_variance(state: InferenceState, worker) -> np.ndarray:
    params = state.params
    if worker in params.workers:
        phi = params.phi[params.worker_position(worker)]
    else:
        phi = float(np.median(params.phi)) if len(params.phi) else 1.0
    return np.outer(params.alpha, params.beta) * phi


def _gain_from_models(state, quality, noise_var):
    schema = state.schema
    t = state.truths
    n, m = schema.n_rows, schema.n_cols
    out = np.empty((n, m))
    cat = schema.categorical_mask
    cont_gain = _continuous_gain(t.var, noise_var)
    out[:, ~cat] = cont_gain[:, ~cat]
    if cat.any():
        probs = t.probs[:, cat, :].reshape(-1, t.probs.shape[-1])
        labels = np.tile(schema.label_counts[cat], n)
        center = np.argmax(probs, axis=1)
        g = _categorical_gain(probs, labels, center, quality[:, cat].ravel())
        out[:, cat] = g.reshape(n, -1)
    return out


def inherent_gain_table(state: InferenceState, worker) -> np.ndarray:
    """(N, M) inherent gain of every cell for ``worker``."""
    var = _worker_cell_variance(state, worker)
    quality = erf(state.params.epsilon / np.sqrt(2.0 * var))
    return _gain_from_models(state, quality, var)


def conditional_models_table(state: InferenceState, model: CorrelationModel, worker):
    """(quality, noise_var, used) for every cell under the structure-aware model.

    ``used`` marks cells where the conditional mixture replaced the
    inherent model.
    """
    schema = state.schema
    n, m = schema.n_rows, schema.n_cols
    var = _worker_cell_variance(state, worker)
    quality = erf(state.params.epsilon / np.sqrt(2.0 * var))
    noise = var.copy()
    errs = worker_row_errors(state, worker)
    seen = np.isfinite(errs)
    if not seen.any():
        return quality, noise, np.zeros((n, m), bool)
    jj, kk = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    x = np.where(seen, errs, 0.0)[:, None, :]  # (N, 1, M) over k
    p_err, mean, cvar = _conditional_arrays(model, jj[None], kk[None], x)
    active = seen[:, None, :] & model.present[None] & (jj != kk)[None]
    w = np.where(active, model.W[None], 0.0)
    total = w.sum(axis=2)
    usable = active.any(axis=2) & (total > 0)
    safe_total = np.where(usable, total, 1.0)
    cat = schema.categorical_mask
    mix_p = np.clip(np.sum(w * np.nan_to_num(p_err), axis=2) / safe_total, 0.0, 1.0)
    second = np.sum(w * np.nan_to_num(mean ** 2 + np.maximum(cvar, 1e-300)), axis=2) / safe_total
    usable &= np.where(cat[None, :], True, second > 0)
    quality = np.where(usable & cat[None, :], 1.0 - mix_p, quality)
    noise = np.where(usable & ~cat[None, :], second, noise)
    return quality, noise, usable


def structure_aware_gain_table(state: InferenceState, model: CorrelationModel, worker
                               ) -> np.ndarray:
    """(N, M) structure-aware gain of every cell for ``worker``."""
    quality, noise, _ = conditional_models_table(state, model, worker)
    return _gain_from_models(state, quality, noise)


# -- selection -----------------------------------------------------------------------


def eligible_cells(state: InferenceState, worker) -> np.ndarray:
    """(N, M) mask of cells the worker has not answered yet."""
    schema = state.schema
    mask = np.ones((schema.n_rows, schema.n_cols), bool)
    if worker in state.answers.workers:
        for a in state.answers.worker_answers(worker):
            mask[a.row, a.col] = False
    return mask


def policy_scores(state: InferenceState, model: CorrelationModel | None, worker,
                  config: AssignmentConfig) -> np.ndarray:
    """(N, M) score of every cell under a scoring policy (higher is better)."""
    if config.policy is Policy.ENTROPY:
        return entropy_table(state)
    if config.policy is Policy.INHERENT_IG:
        return inherent_gain_table(state, worker)
    if config.policy is Policy.STRUCTURE_AWARE_IG:
        if model is None:
            model = state_correlations(state)
        return structure_aware_gain_table(state, model, worker)
    raise ValueError(f"policy {config.policy.value} does not score cells")


def _worker_index(state, worker) -> int:
    workers = state.answers.workers
    return workers.index(worker) if worker in workers else len(workers)


def select_tasks(state: InferenceState, model: CorrelationModel | None, worker,
                 config: AssignmentConfig) -> list[tuple[int, int]]:
    """Up to ``batch_k`` cells for ``worker``, best first.

    Only cells the worker has not answered are eligible.  Ties are broken
    in (row, col) order.  Fewer than ``batch_k`` cells come back when fewer
    remain; none at all raises :class:`TaskExhausted`.
    """
    schema = state.schema
    m = schema.n_cols
    eligible = eligible_cells(state, worker).ravel()
    pool = np.flatnonzero(eligible)
    if len(pool) == 0:
        raise TaskExhausted(f"worker {worker!r} has answered every cell")
    k = min(config.batch_k, len(pool))
    if config.policy is Policy.RANDOM:
        rng = np.random.default_rng([config.seed, len(state.answers),
                                     _worker_index(state, worker)])
        chosen = np.sort(rng.choice(pool, k, replace=False))
    elif config.policy is Policy.LOOPING:
        start = len(state.answers) % schema.n_cells
        order = np.roll(np.arange(schema.n_cells), -start)
        chosen = order[eligible[order]][:k]
    else:
        scores = policy_scores(state, model, worker, config).ravel()
        order = np.argsort(-scores[pool], kind="stable")
        chosen = pool[order[:k]]
    return [(int(c // m), int(c % m)) for c in chosen]


def batch_gain(gains: np.ndarray, cells: Sequence[tuple[int, int]]) -> float:
    """Gain of a set of cells: the sum of the individual gains."""
    return float(sum(gains[i, j] for i, j in cells))
