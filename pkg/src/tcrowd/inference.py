"""EM truth inference over mixed categorical/continuous tables.

The M-step maximises the expected complete-data log-likelihood by
gradient ascent on log-parameters.  It is organised as block coordinate
ascent: with alpha and beta fixed the objective separates into one term
per worker, and likewise for rows given (beta, phi) and columns given
(alpha, phi).  Each block therefore takes per-parameter steps that are
accepted only when that parameter's own partial objective does not drop,
which makes every block update monotone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg
from scipy.special import erf, erfc, erfcx, logsumexp

from .core import (
    DEFAULT_EPSILON,
    QUALITY_FLOOR,
    Answer,
    AnswerSet,
    ModelParams,
    Observations,
    Standardizer,
    TableSchema,
    TruthTable,
)

log = logging.getLogger(__name__)

_SQRT_PI = math.sqrt(math.pi)
_LOG_2PI = math.log(2.0 * math.pi)


class OptimizationError(RuntimeError):
    """The M-step objective kept decreasing; carries the last stable parameters."""

    def __init__(self, message: str, params: ModelParams):
        super().__init__(message)
        self.params = params


@dataclass
class InferenceConfig:
    convergence_threshold: float = 1e-5
    max_em_iterations: int = 100
    gd_step: float = 0.05
    gd_max_iterations: int = 200
    gd_tolerance: float = 1e-6
    epsilon: float = DEFAULT_EPSILON
    # Bounds in standardized units. Workers with fewer than two answers get
    # the tighter range since one answer cannot identify a variance.
    phi_bounds: tuple[float, float] = (1e-4, 1e4)
    sparse_phi_bounds: tuple[float, float] = (0.01, 100.0)
    difficulty_bounds: tuple[float, float] = (1e-3, 1e3)
    # Starting worker variance; 0.25 puts the starting quality (~0.68 at the
    # default epsilon) above chance on every column, binary ones included.
    initial_phi: float = 0.25
    # Optional log-normal shrinkage: standard deviation (in log space) of a
    # hierarchical prior pulling each of ln alpha, ln beta, ln phi toward
    # its own block mean.  None disables it.
    difficulty_prior_sd: float | None = None
    phi_prior_sd: float | None = None

    def __post_init__(self):
        for name in ("convergence_threshold", "gd_step", "gd_tolerance", "epsilon",
                     "initial_phi"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_em_iterations < 1 or self.gd_max_iterations < 1:
            raise ValueError("iteration limits must be positive")


@dataclass
class InferenceState:
    """A snapshot of EM: posteriors, parameters and the data they came from."""

    schema: TableSchema
    answers: AnswerSet
    observations: Observations
    standardizer: Standardizer
    truths: TruthTable
    params: ModelParams
    objective: float
    iteration: int
    converged: bool = False
    history: list[float] = field(default_factory=list)

    def estimates(self) -> np.ndarray:
        return extract_truth(self)


# -- E-step -------------------------------------------------------------------


def _answer_variance(obs: Observations, params: ModelParams) -> np.ndarray:
    return params.alpha[obs.row] * params.beta[obs.col] * params.phi[obs.worker]


def prior_truths(schema: TableSchema, params: ModelParams) -> TruthTable:
    n, m, lmax = schema.n_rows, schema.n_cols, schema.max_labels
    probs = np.zeros((n, m, lmax))
    for j, col in enumerate(schema.columns):
        if col.is_categorical:
            probs[:, j, : col.n_labels] = 1.0 / col.n_labels
    mean = np.broadcast_to(params.prior_mean, (n, m)).copy()
    var = np.broadcast_to(params.prior_var, (n, m)).copy()
    return TruthTable(schema, probs, mean, var)


def e_step(obs: Observations, params: ModelParams, schema: TableSchema) -> TruthTable:
    """Posterior of every cell given the current parameters.

    Continuous cells get the closed-form normal posterior (precision-weighted
    average of answers and prior); categorical cells the normalised product
    of per-answer likelihood factors under a uniform prior.  Cells without
    answers come back as their prior.
    """
    n, m, lmax = schema.n_rows, schema.n_cols, schema.max_labels
    nc = n * m
    var = _answer_variance(obs, params)
    cell = obs.cell

    cont = ~obs.is_cat
    prec = np.bincount(cell[cont], weights=1.0 / var[cont], minlength=nc).reshape(n, m)
    wsum = np.bincount(cell[cont], weights=obs.value[cont] / var[cont], minlength=nc)
    prior_prec = 1.0 / params.prior_var
    tvar = 1.0 / (prec + prior_prec)
    tmean = (wsum.reshape(n, m) + params.prior_mean * prior_prec) * tvar

    cat = obs.is_cat
    log_q, log_qc = _log_quality(var[cat], params.epsilon)
    log_wrong = log_qc - np.log(obs.n_labels[cat] - 1.0)
    base = np.bincount(cell[cat], weights=log_wrong, minlength=nc)
    slot = cell[cat] * lmax + obs.value[cat].astype(np.int64)
    bonus = np.bincount(slot, weights=log_q - log_wrong, minlength=nc * lmax)
    logp = base[:, None] + bonus.reshape(nc, lmax)
    valid = np.arange(lmax)[None, :] < np.tile(schema.label_counts, n)[:, None]
    logp = np.where(valid, logp, -np.inf)
    is_cat_cell = np.tile(schema.categorical_mask, n)
    logp[~is_cat_cell] = 0.0
    probs = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
    probs[~is_cat_cell] = 0.0
    return TruthTable(schema, probs.reshape(n, m, lmax), tmean, tvar)


# -- M-step objective and gradients ---------------------------------------------


def _log_quality(var, epsilon):
    x = epsilon / np.sqrt(2.0 * var)
    q = erf(x)
    qc = erfc(x)
    return np.log(np.maximum(q, QUALITY_FLOOR)), np.log(np.maximum(qc, QUALITY_FLOOR))


@dataclass
class _Sufficient:
    """Per-answer expectations under the current posterior (fixed in an M-step)."""

    cont: np.ndarray
    cat: np.ndarray
    sq: np.ndarray  # E[(a - T)^2] for continuous answers
    p_agree: np.ndarray  # P(T = a) for categorical answers
    log_l1: np.ndarray  # ln(|L_j| - 1) for categorical answers


def _sufficient(obs: Observations, truths: TruthTable) -> _Sufficient:
    cont = ~obs.is_cat
    cat = obs.is_cat
    r, c = obs.row, obs.col
    sq = (obs.value[cont] - truths.mean[r[cont], c[cont]]) ** 2 + truths.var[r[cont], c[cont]]
    p_agree = truths.probs[r[cat], c[cat], obs.value[cat].astype(np.int64)]
    log_l1 = np.log(obs.n_labels[cat] - 1.0)
    return _Sufficient(cont, cat, sq, p_agree, log_l1)


def _terms(suff: _Sufficient, logvar: np.ndarray, epsilon: float, want_grad=True):
    """Per-answer expected log-likelihood and its first two derivatives in ln(v).

    Returns (ell, grad, curv); grad and curv are None when not requested.
    """
    ell = np.empty_like(logvar)
    grad = curv = None
    if want_grad:
        grad = np.empty_like(logvar)
        curv = np.empty_like(logvar)

    lv = logvar[suff.cont]
    inv = np.exp(-lv)
    half_sq = 0.5 * suff.sq * inv
    ell[suff.cont] = -0.5 * (_LOG_2PI + lv) - half_sq
    if want_grad:
        grad[suff.cont] = half_sq - 0.5
        curv[suff.cont] = -half_sq

    lv = logvar[suff.cat]
    x = epsilon * np.exp(-0.5 * lv) / math.sqrt(2.0)
    q = erf(x)
    qc = erfc(x)
    p = suff.p_agree
    ell[suff.cat] = (
        p * np.log(np.maximum(q, QUALITY_FLOOR))
        + (1.0 - p) * (np.log(np.maximum(qc, QUALITY_FLOOR)) - suff.log_l1)
    )
    if want_grad:
        # dq/dln(v) = -(x/sqrt(pi)) exp(-x^2).  With A = exp(-x^2)/erf(x) and
        # B = exp(-x^2)/erfc(x) = 1/erfcx(x):
        #   g = -(x/sqrt(pi)) (p A - (1-p) B),  dg/dln(v) = -(x/2) dg/dx.
        live_q = q > QUALITY_FLOOR
        live_qc = qc > QUALITY_FLOOR
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            a = np.where(live_q, np.exp(-x * x) / q, 0.0)
        b = np.where(live_qc, 1.0 / erfcx(x), 0.0)
        da = np.where(live_q, -2.0 * x * a - (2.0 / _SQRT_PI) * a * a, 0.0)
        db = np.where(live_qc, -2.0 * x * b + (2.0 / _SQRT_PI) * b * b, 0.0)
        inner = p * a - (1.0 - p) * b
        dinner = p * da - (1.0 - p) * db
        grad[suff.cat] = -(x / _SQRT_PI) * inner
        dg_dx = -(inner + x * dinner) / _SQRT_PI
        curv[suff.cat] = -0.5 * x * dg_dx
    return ell, grad, curv


def prior_expectation(truths: TruthTable, params: ModelParams) -> float:
    """sum_ij E_T[ln Prior(T_ij)]."""
    schema = truths.schema
    total = 0.0
    for j, col in enumerate(schema.columns):
        if col.is_categorical:
            total -= schema.n_rows * math.log(col.n_labels)
        else:
            mu0, v0 = params.prior_mean[j], params.prior_var[j]
            dev = (truths.mean[:, j] - mu0) ** 2 + truths.var[:, j]
            total += float(np.sum(-0.5 * math.log(2.0 * math.pi * v0) - dev / (2.0 * v0)))
    return total


def m_step_objective(
    obs: Observations,
    truths: TruthTable,
    params: ModelParams,
    include_prior: bool = True,
) -> float:
    """Q(alpha, beta, phi): expected joint log-likelihood under ``truths``."""
    for name in ("phi", "alpha", "beta"):
        if np.any(~(getattr(params, name) > 0)):
            raise ValueError(f"{name} must be strictly positive")
    suff = _sufficient(obs, truths)
    logvar = np.log(_answer_variance(obs, params))
    ell, _, _ = _terms(suff, logvar, params.epsilon, want_grad=False)
    total = math.fsum(ell)
    if include_prior:
        total += prior_expectation(truths, params)
    return total


def objective_gradient(
    obs: Observations, truths: TruthTable, params: ModelParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dQ/d ln(phi), dQ/d ln(alpha), dQ/d ln(beta)."""
    suff = _sufficient(obs, truths)
    logvar = np.log(_answer_variance(obs, params))
    _, g, _ = _terms(suff, logvar, params.epsilon)
    return (
        np.bincount(obs.worker, weights=g, minlength=len(params.phi)),
        np.bincount(obs.row, weights=g, minlength=len(params.alpha)),
        np.bincount(obs.col, weights=g, minlength=len(params.beta)),
    )


# -- M-step --------------------------------------------------------------------


def _phi_bounds(counts: np.ndarray, config: InferenceConfig) -> tuple[np.ndarray, np.ndarray]:
    sparse = counts < 2
    lo = np.where(sparse, config.sparse_phi_bounds[0], config.phi_bounds[0])
    hi = np.where(sparse, config.sparse_phi_bounds[1], config.phi_bounds[1])
    return np.log(lo), np.log(hi)


class _BlockAscent:
    """Separable per-parameter ascent for one parameter block.

    Each parameter takes a Newton step on its own partial objective when the
    curvature is negative (a scaled gradient step otherwise), damped by a
    per-parameter factor that halves on overshoot and recovers on success.
    """

    def __init__(self, index, size, lo, hi, step, damping=None, free=None, shrink=0.0):
        self.shrink = shrink
        self.index = index
        self.size = size
        self.counts = np.bincount(index, minlength=size).astype(np.float64)
        self.active = self.counts > 0
        if free is not None:
            self.active &= free
        self.lo = lo
        self.hi = hi
        self.step = step
        self.damping = np.ones(size) if damping is None else np.array(damping, dtype=float)

    def update(self, x, offset, suff, epsilon, terms):
        """One step from the per-answer terms at the current point.

        Returns the new x, the per-answer terms there, and the largest
        proposed move.
        """
        ell, g, h = terms
        idx = self.index
        f_old = np.bincount(idx, weights=ell, minlength=self.size)
        grad = np.bincount(idx, weights=g, minlength=self.size)
        curv = np.bincount(idx, weights=h, minlength=self.size)
        if self.shrink and self.active.any():
            # The penalty's center is held at the block mean for this step;
            # re-centering afterwards can only raise the penalised objective.
            center = float(np.mean(x[self.active]))
            f_old = f_old - 0.5 * self.shrink * (x - center) ** 2
            grad = grad - self.shrink * (x - center)
            curv = curv - self.shrink
        counts = np.maximum(self.counts, 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = np.where(curv < 0, -grad / curv, self.step * grad / counts)
        direction = np.where(self.active, np.clip(newton, -2.0, 2.0), 0.0)
        proposal = np.clip(x + self.damping * direction, self.lo, self.hi)
        move = float(np.max(np.abs(proposal - x), initial=0.0))
        new_terms = _terms(suff, offset + proposal[idx], epsilon)
        f_new = np.bincount(idx, weights=new_terms[0], minlength=self.size)
        if self.shrink and self.active.any():
            f_new = f_new - 0.5 * self.shrink * (proposal - center) ** 2
        ok = (f_new >= f_old) & self.active & np.isfinite(f_new)
        x = np.where(ok, proposal, x)
        self.damping = np.where(ok, np.minimum(self.damping * 2.0, 1.0), self.damping * 0.5)
        keep = ok[idx]
        merged = tuple(np.where(keep, n, o) for n, o in zip(new_terms, terms))
        return x, merged, move


def _shrinkage(config: InferenceConfig):
    ds = 0.0 if config.difficulty_prior_sd is None else 1.0 / config.difficulty_prior_sd ** 2
    ps = 0.0 if config.phi_prior_sd is None else 1.0 / config.phi_prior_sd ** 2
    return ds, ps


def _spread(x, mask):
    x = x[mask]
    return float(np.sum((x - x.mean()) ** 2)) if len(x) else 0.0


def _log_shrinkage(lp, la, lb, config: InferenceConfig, masks=None) -> float:
    ds, ps = _shrinkage(config)
    if not (ds or ps):
        return 0.0
    if masks is None:
        masks = (np.ones(len(lp), bool), np.ones(len(la), bool), np.ones(len(lb), bool))
    mp, ma, mb = masks
    return -0.5 * (ds * (_spread(la, ma) + _spread(lb, mb)) + ps * _spread(lp, mp))


def log_shrinkage(params: ModelParams, config: InferenceConfig, obs: Observations | None = None
                  ) -> float:
    """Log-density (up to a constant) of the optional parameter shrinkage.

    With ``obs`` only parameters the M-step can move are included: workers,
    rows and columns with answers, and difficulties that are not pinned.
    """
    masks = None
    if obs is not None:
        per_cell = np.bincount(obs.cell, minlength=obs.n_rows * obs.n_cols)
        repeated = (per_cell >= 2).reshape(obs.n_rows, obs.n_cols)
        masks = (np.bincount(obs.worker, minlength=len(params.phi)) > 0,
                 repeated.any(axis=1), repeated.any(axis=0))
    return _log_shrinkage(np.log(params.phi), np.log(params.alpha), np.log(params.beta),
                          config, masks)


def _fill_idle_workers(phi: np.ndarray, counts: np.ndarray) -> np.ndarray:
    # Workers without answers take the median worker so they can be scored.
    seen = counts > 0
    if seen.any() and not seen.all():
        phi = phi.copy()
        phi[~seen] = np.median(phi[seen])
    return phi


def _normalize(params: ModelParams, counts: np.ndarray, config: InferenceConfig) -> ModelParams:
    a_mean = params.alpha.mean()
    b_mean = params.beta.mean()
    lo, hi = _phi_bounds(counts, config)
    phi = np.clip(params.phi * a_mean * b_mean, np.exp(lo), np.exp(hi))
    phi = _fill_idle_workers(phi, counts)
    return ModelParams(params.workers, phi, params.alpha / a_mean, params.beta / b_mean,
                       params.epsilon, params.prior_mean, params.prior_var)


# Above this many free parameters the joint Newton system is replaced by
# block-wise ascent.
_JOINT_LIMIT = 200_000


# Newton systems over at most this many free parameters are solved densely;
# larger ones eliminate the biggest parameter group first.
_DENSE_LIMIT = 200
# Kept block after the elimination: dense up to this size, sparse beyond.
_DENSE_BLOCK = 2000
# Largest coupling block (entries) between eliminated and kept groups held
# as a dense array.
_DENSE_COUPLING = 4_000_000


class _NewtonSystem:
    """Damped Newton system over the free log-parameters.

    The matrix is -sum_a h_a e_a e_a^T (h_a <= 0) plus the exact shrinkage
    curvature lam * (I - 11^T / n) of each penalised group.  An answer
    touches one worker, one row and one column coordinate, so the answer
    part is diagonal within each group.  Large systems eliminate the biggest
    group through its Schur complement and add the rank-one shrinkage terms
    back with the Woodbury identity, so their cost grows linearly with the
    number of answers.
    """

    def __init__(self, sets, groups, curv, shrink, free):
        self.free = free
        pos = np.full(len(free), -1, dtype=np.int64)
        pos[free] = np.arange(int(free.sum()))
        nf = int(free.sum())
        # shrink: (mask, lam) pairs; the rank-one part uses the mask size.
        pen = np.zeros(len(free))
        self.lowrank = []
        for mask, lam in shrink:
            if not lam or not mask.any():
                continue
            pen[mask] += lam
            u = np.zeros(nf)
            u[pos[mask & free]] = 1.0
            if u.any():
                self.lowrank.append((u, lam / int(mask.sum())))
        self.dense = nf <= _DENSE_LIMIT
        if self.dense:
            ps = [pos[s] for s in sets]
            mat = np.zeros(nf * nf)
            for a in ps:
                for b in ps:
                    m = (a >= 0) & (b >= 0)
                    mat += np.bincount(a[m] * nf + b[m], weights=curv[m], minlength=nf * nf)
            mat = mat.reshape(nf, nf) + np.diag(pen[free])
            for u, c in self.lowrank:
                mat -= c * np.outer(u, u)
            self.matrix = mat
            diag = np.diag(mat)
        else:
            self._schur_setup(sets, groups, curv, pen, pos)
            diag = np.zeros(nf)
            diag[self.d_pos] = self.diag_d
            diag[self.o_pos] = self.diag_o
            for u, c in self.lowrank:
                diag -= c * u
        floor = 1e-9 * (1.0 + float(np.mean(np.abs(diag)))) if nf else 0.0
        self.scale = np.maximum(diag, floor)

    def _schur_setup(self, sets, groups, curv, pen, pos):
        free = self.free
        counts = [int(np.count_nonzero(free & g)) for g in groups]
        big = int(np.argmax(counts))
        d_abs = np.nonzero(free & groups[big])[0]
        o_abs = np.nonzero(free & ~groups[big])[0]
        self.d_pos, self.o_pos = pos[d_abs], pos[o_abs]
        nd, no = len(d_abs), len(o_abs)
        local = np.full(len(free), -1, dtype=np.int64)
        local[d_abs] = np.arange(nd)
        local[o_abs] = np.arange(no)
        pd = local[sets[big]]
        p1, p2 = (local[s] for k, s in enumerate(sets) if k != big)
        on_d = pd >= 0
        self.diag_d = np.bincount(pd[on_d], weights=curv[on_d], minlength=nd) + pen[d_abs]
        rows, cols, vals = [], [], []
        for p in (p1, p2):
            m = on_d & (p >= 0)
            rows.append(p[m])
            cols.append(pd[m])
            vals.append(curv[m])
        rows, cols, vals = (np.concatenate(x) for x in (rows, cols, vals))
        # The coupling spans the two small groups against the eliminated one,
        # so it is usually cheap to hold densely.
        if no * nd <= _DENSE_COUPLING:
            self.coupling = np.bincount(rows * nd + cols, weights=vals,
                                        minlength=no * nd).reshape(no, nd)
        else:
            self.coupling = sparse.csr_matrix((vals, (rows, cols)), shape=(no, nd))
        rows, cols, vals = [], [], []
        for a, b in ((p1, p1), (p2, p2), (p1, p2), (p2, p1)):
            m = (a >= 0) & (b >= 0)
            rows.append(a[m])
            cols.append(b[m])
            vals.append(curv[m])
        rows, cols, vals = (np.concatenate(x) for x in (rows, cols, vals))
        self.o_dense = no <= _DENSE_BLOCK
        if self.o_dense:
            block = np.bincount(rows * no + cols, weights=vals, minlength=no * no)
            self.block = block.reshape(no, no) + np.diag(pen[o_abs])
            self.diag_o = np.diag(self.block).copy()
        else:
            self.block = (sparse.csr_matrix((vals, (rows, cols)), shape=(no, no))
                          + sparse.diags(pen[o_abs]))
            self.diag_o = self.block.diagonal()

    def _solve_base(self, rhs, damping):
        """Solve the system without its rank-one terms; rhs is (nf, k)."""
        d_inv = 1.0 / (self.diag_d + damping * self.scale[self.d_pos])
        gd, go = rhs[self.d_pos], rhs[self.o_pos]
        out = np.zeros_like(rhs)
        if len(self.o_pos):
            if sparse.issparse(self.coupling):
                reduce = self.coupling @ sparse.diags(d_inv) @ self.coupling.T
            else:
                reduce = (self.coupling * d_inv) @ self.coupling.T
            r = go - self.coupling @ (d_inv[:, None] * gd)
            damp = damping * self.scale[self.o_pos]
            if self.o_dense or not sparse.issparse(reduce):
                block = self.block.toarray() if sparse.issparse(self.block) else self.block
                if sparse.issparse(reduce):
                    reduce = reduce.toarray()
                so = np.linalg.solve(block + np.diag(damp) - reduce, r)
            else:
                schur = (self.block + sparse.diags(damp) - reduce).tocsc()
                so = splinalg.splu(schur).solve(r)
            out[self.o_pos] = so
            gd = gd - self.coupling.T @ so
        out[self.d_pos] = d_inv[:, None] * gd
        return out

    def solve(self, grad, damping):
        """Step over the free coordinates."""
        g = grad[self.free]
        if self.dense:
            return np.linalg.solve(self.matrix + np.diag(damping * self.scale), g)
        if not self.lowrank:
            return self._solve_base(g[:, None], damping)[:, 0]
        # (B - U C U^T)^-1 g = y + Z (C^-1 - U^T Z)^-1 U^T y,  y = B^-1 g, Z = B^-1 U
        U = np.column_stack([u for u, _ in self.lowrank])
        C_inv = np.diag([1.0 / c for _, c in self.lowrank])
        sol = self._solve_base(np.column_stack([g, U]), damping)
        y, Z = sol[:, 0], sol[:, 1:]
        return y + Z @ np.linalg.solve(C_inv - U.T @ Z, U.T @ y)


def _shrinkage_terms(x, masks, weights):
    """Penalty value and gradient of the centered shrinkage."""
    value = 0.0
    grad = np.zeros_like(x)
    for mask, lam in zip(masks, weights):
        if not lam or not mask.any():
            continue
        idx = np.nonzero(mask)[0]
        dev = x[idx] - x[idx].mean()
        value -= 0.5 * lam * float(dev @ dev)
        grad[idx] -= lam * dev
    return value, grad


def _joint_ascent(obs, suff, eps, x, lo, hi, masks, weights, config, damping):
    """Levenberg-Marquardt damped Newton ascent over all log-parameters.

    Each answer depends on the parameters only through ln(v), the sum of
    one worker, one row and one column coordinate, so coordinate-wise updates
    zigzag along the coupled directions.  The Hessian uses the concave part
    of the per-answer curvature, which keeps every proposal an ascent
    direction; a proposal is kept only if the objective rises, otherwise the
    damping grows and the step is retried.

    Returns (x, damping).
    """
    size = len(x)
    w, n = len(masks[0]), len(masks[1])
    sets = (obs.worker, w + obs.row, w + n + obs.col)
    active = np.concatenate(masks)
    offsets = np.cumsum([0] + [len(m) for m in masks])
    full = []
    for k, m in enumerate(masks):
        f = np.zeros(size, bool)
        f[offsets[k]:offsets[k + 1]] = m
        full.append(f)

    def evaluate(x, want_grad):
        terms = _terms(suff, x[sets[0]] + x[sets[1]] + x[sets[2]], eps, want_grad)
        pen = _shrinkage_terms(x, full, weights)
        return float(np.sum(terms[0])) + pen[0], terms, pen

    # A carried damping only ever speeds the start up; one inflated by
    # rejections at round-off level must not freeze the next M-step.
    damping = 1e-3 if damping is None else min(float(damping), 1e-3)
    f, terms, pen = evaluate(x, True)
    if not math.isfinite(f):
        raise FloatingPointError("M-step objective is not finite")
    for _ in range(config.gd_max_iterations):
        _, g, h = terms
        grad = sum(np.bincount(s, weights=g, minlength=size) for s in sets) + pen[1]
        free = active & ~((x <= lo) & (grad < 0)) & ~((x >= hi) & (grad > 0))
        if not free.any():
            break
        system = _NewtonSystem(sets, full, -np.minimum(h, 0.0), zip(full, weights), free)
        accepted = False
        while damping < 1e12:
            try:
                step = system.solve(grad, damping)
            except (RuntimeError, np.linalg.LinAlgError):
                damping *= 10.0
                continue
            if not np.all(np.isfinite(step)):
                damping *= 10.0
                continue
            step *= min(1.0, 2.0 / max(float(np.max(np.abs(step))), 1e-300))
            proposal = x.copy()
            proposal[free] = np.clip(x[free] + step, lo[free], hi[free])
            f_new, terms_new, pen_new = evaluate(proposal, True)
            if math.isfinite(f_new) and f_new >= f:
                accepted = True
                break
            damping *= 10.0
        if not accepted:
            break
        move = float(np.max(np.abs(proposal - x)))
        gain = f_new - f
        x, f, terms, pen = proposal, f_new, terms_new, pen_new
        damping = max(damping / 10.0, 1e-12)
        if move < config.gd_tolerance or gain < config.gd_tolerance * 1e-3:
            break
    return x, damping


def m_step(
    obs: Observations,
    truths: TruthTable,
    params: ModelParams,
    config: InferenceConfig,
    steps: dict | None = None,
) -> ModelParams:
    """Maximise Q over (alpha, beta, phi) with the posteriors held fixed.

    ``steps`` optionally carries the adaptive step damping from one call to
    the next (run_em passes the same dict every iteration).
    """
    suff = _sufficient(obs, truths)
    eps = params.epsilon
    lp, la, lb = np.log(params.phi), np.log(params.alpha), np.log(params.beta)
    counts_w = np.bincount(obs.worker, minlength=len(lp))
    plo, phi_hi = _phi_bounds(counts_w, config)
    dlo, dhi = (math.log(b) for b in config.difficulty_bounds)
    # A row (column) whose cells all have a single answer cannot separate its
    # difficulty from the workers' variances; such difficulties stay at 1.
    per_cell = np.bincount(obs.cell, minlength=obs.n_rows * obs.n_cols)
    repeated = (per_cell >= 2).reshape(obs.n_rows, obs.n_cols)
    free_rows, free_cols = repeated.any(axis=1), repeated.any(axis=0)
    free_rows &= np.bincount(obs.row, minlength=obs.n_rows) > 0
    free_cols &= np.bincount(obs.col, minlength=obs.n_cols) > 0
    la = np.where(free_rows, la, 0.0)
    lb = np.where(free_cols, lb, 0.0)
    lp = np.clip(lp, plo, phi_hi)
    masks = (counts_w > 0, free_rows, free_cols)
    ds, ps = _shrinkage(config)
    steps = {} if steps is None else steps

    if int(sum(m.sum() for m in masks)) <= _JOINT_LIMIT:
        x = np.concatenate([lp, la, lb])
        lo = np.concatenate([plo, np.full(len(la) + len(lb), dlo)])
        hi = np.concatenate([phi_hi, np.full(len(la) + len(lb), dhi)])
        try:
            x, steps["joint"] = _joint_ascent(obs, suff, eps, x, lo, hi, masks,
                                              (ps, ds, ds), config, steps.get("joint"))
        except FloatingPointError as exc:
            raise OptimizationError(str(exc), params) from None
        w, n = len(lp), len(la)
        lp, la, lb = x[:w], x[w:w + n], x[w + n:]
    else:
        lp, la, lb = _block_coordinate(obs, suff, eps, lp, la, lb, (plo, phi_hi), (dlo, dhi),
                                       masks, (ps, ds), config, params, steps)
    raw = ModelParams(params.workers, np.exp(lp), np.exp(la), np.exp(lb), eps,
                      params.prior_mean, params.prior_var)
    return _normalize(raw, counts_w, config)


def _block_coordinate(obs, suff, eps, lp, la, lb, phi_range, diff_range, masks, weights,
                      config, params, steps):
    """Cyclic block ascent over (phi, alpha, beta) for tables too large for
    the joint Newton system."""
    plo, phi_hi = phi_range
    dlo, dhi = diff_range
    ps, ds = weights
    blocks = {
        "phi": _BlockAscent(obs.worker, len(lp), plo, phi_hi, config.gd_step, steps.get("phi"),
                            shrink=ps),
        "alpha": _BlockAscent(obs.row, len(la), dlo, dhi, config.gd_step, steps.get("alpha"),
                              masks[1], shrink=ds),
        "beta": _BlockAscent(obs.col, len(lb), dlo, dhi, config.gd_step, steps.get("beta"),
                             masks[2], shrink=ds),
    }

    def total(terms, lp, la, lb):
        return float(np.sum(terms[0])) + _log_shrinkage(lp, la, lb, config, masks)

    terms = _terms(suff, lp[obs.worker] + la[obs.row] + lb[obs.col], eps)
    q_prev = total(terms, lp, la, lb)
    stable = (lp, la, lb)
    drops = 0
    for _ in range(config.gd_max_iterations):
        lp, terms, mp = blocks["phi"].update(lp, la[obs.row] + lb[obs.col], suff, eps, terms)
        la, terms, ma = blocks["alpha"].update(la, lp[obs.worker] + lb[obs.col], suff, eps,
                                               terms)
        lb, terms, mb = blocks["beta"].update(lb, lp[obs.worker] + la[obs.row], suff, eps,
                                              terms)
        q_now = total(terms, lp, la, lb)
        if not math.isfinite(q_now) or q_now < q_prev - config.gd_tolerance:
            drops += 1
            if drops >= 3 or not math.isfinite(q_now):
                last = ModelParams(params.workers, *(np.exp(v) for v in stable),
                                   eps, params.prior_mean, params.prior_var)
                raise OptimizationError("M-step objective decreased repeatedly", last)
        else:
            drops = 0
            stable = (lp, la, lb)
        q_prev = q_now
        if max(mp, ma, mb) < config.gd_tolerance:
            break
    for k, block in blocks.items():
        steps[k] = np.maximum(block.damping, 0.125)
    return lp, la, lb


# -- EM driver -----------------------------------------------------------------


def _empirical_priors(obs: Observations, schema: TableSchema):
    mean = np.zeros(schema.n_cols)
    var = np.ones(schema.n_cols)
    for j, col in enumerate(schema.columns):
        if col.is_categorical:
            continue
        v = obs.value[obs.col == j]
        if len(v) >= 2 and v.var() > 0:
            mean[j] = v.mean()
            var[j] = v.var()
        elif len(v):
            mean[j] = v.mean()
    return mean, var


def _observations(answers: AnswerSet, params: ModelParams, standardizer: Standardizer):
    obs = Observations.from_answers(answers, standardizer)
    remap = np.array([params.worker_position(w) for w in answers.workers], dtype=np.int64)
    if len(remap):
        obs.worker = remap[obs.worker]
    return obs


def _carry_params(workers, schema, previous: ModelParams | None, config: InferenceConfig,
                  prior_mean, prior_var):
    params = ModelParams.initial(workers, schema.n_rows, schema.n_cols, config.epsilon,
                                 prior_mean=prior_mean, prior_var=prior_var)
    params.phi = np.full(len(params.workers), config.initial_phi)
    if previous is not None:
        known = {w: previous.phi[k] for k, w in enumerate(previous.workers)}
        fallback = float(np.median(previous.phi)) if len(previous.phi) else 1.0
        params.phi = np.array([known.get(w, fallback) for w in workers], dtype=np.float64)
        params.alpha = previous.alpha.copy()
        params.beta = previous.beta.copy()
    return params


def run_em(
    answers: AnswerSet,
    schema: TableSchema | None = None,
    config: InferenceConfig | None = None,
    *,
    warm_start: InferenceState | None = None,
) -> InferenceState:
    """Alternate M-step and E-step until the parameters settle.

    The posteriors start from an E-step under the starting parameters
    (``config.initial_phi`` with unit difficulties, or those of
    ``warm_start``).  An M-step against the bare prior would fit every
    categorical quality to chance level, since a uniform posterior agrees
    with any answer with probability 1/|L|.  Stops when the largest absolute
    change of any phi/alpha/beta entry falls below
    ``config.convergence_threshold``.
    """
    schema = schema or answers.schema
    config = config or InferenceConfig()
    if len(answers) == 0:
        raise ValueError("run_em needs at least one answer")
    standardizer = Standardizer.fit(answers)
    raw = Observations.from_answers(answers, standardizer)
    prior_mean, prior_var = _empirical_priors(raw, schema)
    previous = warm_start.params if warm_start is not None else None
    params = _carry_params(answers.workers, schema, previous, config, prior_mean, prior_var)
    obs = _observations(answers, params, standardizer)

    truths = e_step(obs, params, schema)
    history: list[float] = []
    converged = False
    iteration = 0
    objective = math.nan
    steps: dict = {}
    for iteration in range(1, config.max_em_iterations + 1):
        new = m_step(obs, truths, params, config, steps)
        truths = e_step(obs, new, schema)
        objective = m_step_objective(obs, truths, new) + log_shrinkage(new, config, obs)
        history.append(objective)
        change = float(np.max(np.abs(new.vector() - params.vector())))
        params = new
        if change < config.convergence_threshold:
            converged = True
            break
    log.debug("EM stopped after %d iterations (converged=%s)", iteration, converged)
    return InferenceState(schema, answers, obs, standardizer, truths, params, objective,
                          iteration, converged, history)


def state_from_params(answers: AnswerSet, params: ModelParams,
                      standardizer: Standardizer | None = None) -> InferenceState:
    """Snapshot with the posteriors of ``params`` and no EM run.

    ``standardizer`` defaults to the identity, so continuous answers and
    priors are taken as already on the model scale.
    """
    schema = answers.schema
    standardizer = standardizer or Standardizer.identity(schema.n_cols)
    obs = _observations(answers, params, standardizer)
    truths = e_step(obs, params, schema)
    objective = m_step_objective(obs, truths, params)
    return InferenceState(schema, answers, obs, standardizer, truths, params, objective, 0)


def extract_truth(state: InferenceState) -> np.ndarray:
    """(N, M) point estimates: argmax label index or de-standardized mean."""
    est = state.truths.point_estimates()
    schema = state.schema
    cont = ~schema.categorical_mask
    cols = np.nonzero(cont)[0]
    est[:, cont] = state.standardizer.inverse(cols[None, :], est[:, cont])
    return est


# -- incremental update --------------------------------------------------------


def refresh_cells(obs: Observations, params: ModelParams, truths: TruthTable,
                  cells: Iterable[tuple[int, int]]) -> TruthTable:
    """Recompute the posterior of ``cells`` only; every other cell is copied."""
    schema = truths.schema
    cells = sorted(set(cells))
    out = truths.copy()
    if not cells:
        return out
    m = schema.n_cols
    wanted = np.array([i * m + j for i, j in cells])
    sel = np.isin(obs.cell, wanted)
    sub = Observations(obs.worker[sel], obs.row[sel], obs.col[sel], obs.value[sel],
                       obs.n_rows, obs.n_cols, obs.is_cat[sel], obs.n_labels[sel])
    fresh = e_step(sub, params, schema)
    rows = np.array([c[0] for c in cells])
    cols = np.array([c[1] for c in cells])
    out.probs[rows, cols] = fresh.probs[rows, cols]
    out.mean[rows, cols] = fresh.mean[rows, cols]
    out.var[rows, cols] = fresh.var[rows, cols]
    return out


def reoptimize_workers(obs: Observations, truths: TruthTable, params: ModelParams,
                       workers: Sequence[int], config: InferenceConfig) -> ModelParams:
    """Re-fit phi for the given worker positions with everything else fixed."""
    workers = np.unique(np.asarray(workers, dtype=np.int64))
    sel = np.isin(obs.worker, workers)
    out = params.copy()
    if not sel.any():
        return out
    sub = Observations(obs.worker[sel], obs.row[sel], obs.col[sel], obs.value[sel],
                       obs.n_rows, obs.n_cols, obs.is_cat[sel], obs.n_labels[sel])
    suff = _sufficient(sub, truths)
    counts = np.bincount(obs.worker, minlength=len(params.phi))
    lo, hi = _phi_bounds(counts, config)
    block = _BlockAscent(sub.worker, len(params.phi), lo, hi, config.gd_step)
    lp = np.clip(np.log(params.phi), lo, hi)
    offset = np.log(params.alpha[sub.row] * params.beta[sub.col])
    terms = _terms(suff, offset + lp[sub.worker], params.epsilon)
    for _ in range(config.gd_max_iterations):
        lp, terms, move = block.update(lp, offset, suff, params.epsilon, terms)
        if move < config.gd_tolerance:
            break
    out.phi = np.where(np.isin(np.arange(len(lp)), workers), np.exp(lp), params.phi)
    return out


def incremental_update(
    state: InferenceState,
    new_answer: Answer | Sequence[Answer],
    config: InferenceConfig | None = None,
) -> InferenceState:
    """Ingest answer(s) without a full EM run.

    The touched cells' posteriors are recomputed under the current
    parameters, then phi is locally re-fit for the workers who answered
    those cells.  All other posteriors and all alpha/beta stay as they were.
    The standardization of the snapshot is kept, and ``objective`` keeps
    the value from the last full EM run.
    """
    config = config or InferenceConfig(epsilon=state.params.epsilon)
    batch = [new_answer] if isinstance(new_answer, Answer) else list(new_answer)
    answers = state.answers.copy()
    params = state.params
    for a in batch:
        a = answers.add(a)
        if a.worker not in params.workers:
            fill = float(np.median(params.phi)) if len(params.phi) else 1.0
            params = ModelParams(params.workers + (a.worker,), np.append(params.phi, fill),
                                 params.alpha, params.beta, params.epsilon,
                                 params.prior_mean, params.prior_var)
    schema = state.schema
    obs = state.observations
    for pos in range(len(state.answers), len(answers)):
        a = answers[pos]
        value = a.value
        if not schema.columns[a.col].is_categorical:
            value = float(state.standardizer.forward(a.col, value))
        obs = obs.appended(schema, params.worker_position(a.worker), a.row, a.col, value)
    touched = {(a.row, a.col) for a in batch}
    truths = refresh_cells(obs, params, state.truths, touched)
    involved = {params.worker_position(w) for i, j in touched for w in answers.cell_workers(i, j)}
    params = reoptimize_workers(obs, truths, params, sorted(involved), config)
    return InferenceState(schema, answers, obs, state.standardizer, truths, params,
                          state.objective, state.iteration, state.converged,
                          list(state.history))
