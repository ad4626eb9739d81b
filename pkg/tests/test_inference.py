import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcrowd import inference as inf
from tcrowd.core import (
    Answer,
    AnswerSet,
    ModelParams,
    Observations,
    Standardizer,
    TruthTable,
    quality_from_variance,
)
from tcrowd.inference import (
    InferenceConfig,
    OptimizationError,
    e_step,
    extract_truth,
    incremental_update,
    m_step,
    m_step_objective,
    objective_gradient,
    run_em,
    state_from_params,
)
from tcrowd.simulator import GeneratorConfig, generate_dataset

from conftest import fixed_state, make_answers, make_schema, phi_for_quality


def obs_of(answers, params):
    return inf._observations(answers, params, Standardizer.identity(answers.schema.n_cols))


# -- E-step -----------------------------------------------------------------------


def test_e_step_continuous_example():
    s = fixed_state(make_schema(["cont"]), [("u", 0, 0, 2.0)], {"u": 1.0})
    t = s.truths.cell(0, 0)
    assert t.mean == pytest.approx(1.0, abs=1e-15)
    assert t.variance == pytest.approx(0.5, abs=1e-15)


def test_e_step_categorical_example():
    phi = phi_for_quality(0.8)
    s = fixed_state(make_schema(["cat"]), [("u", 0, 0, 0), ("v", 0, 0, 0)],
                    {"u": phi, "v": phi})
    assert s.truths.cell(0, 0).probs[0] == pytest.approx(0.64 / 0.68, abs=1e-12)


def test_e_step_unanswered_cell_is_prior():
    s = fixed_state(make_schema(["cat", "cat"], labels=4), [("u", 0, 0, 1)], {"u": 0.3})
    assert np.array_equal(s.truths.cell(0, 1).probs, np.full(4, 0.25))


def _enumerate_posterior(values, qualities, n_labels):
    post = np.ones(n_labels)
    for z in range(n_labels):
        for a, q in zip(values, qualities):
            post[z] *= q if a == z else (1 - q) / (n_labels - 1)
    return post / post.sum()


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 4), st.data())
def test_e_step_matches_enumeration(n_labels, data):
    k = data.draw(st.integers(1, 3))
    values = data.draw(st.lists(st.integers(0, n_labels - 1), min_size=k, max_size=k))
    phis = data.draw(st.lists(st.floats(0.02, 20.0), min_size=k, max_size=k))
    ws = [f"w{t}" for t in range(k)]
    s = fixed_state(make_schema(["cat"], labels=n_labels),
                    [(w, 0, 0, v) for w, v in zip(ws, values)], dict(zip(ws, phis)))
    ref = _enumerate_posterior(values, quality_from_variance(np.array(phis), 0.5), n_labels)
    assert np.allclose(s.truths.cell(0, 0).probs, ref, rtol=0, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.data())
def test_continuous_mean_in_convex_hull(values, data):
    phis = data.draw(st.lists(st.floats(0.01, 100.0), min_size=len(values),
                              max_size=len(values)))
    ws = [f"w{t}" for t in range(len(values))]
    s = fixed_state(make_schema(["cont"]), [(w, 0, 0, v) for w, v in zip(ws, values)],
                    dict(zip(ws, phis)))
    hull = values + [0.0]
    m = s.truths.cell(0, 0).mean
    assert min(hull) - 1e-9 <= m <= max(hull) + 1e-9


# -- objective -----------------------------------------------------------------------


def test_objective_degenerate_posterior():
    schema = make_schema(["cont"])
    answers = make_answers(schema, [("u", 0, 0, 0.0)])
    p = ModelParams(("u",), [1.0], [1.0], [1.0])
    obs = obs_of(answers, p)
    truths = TruthTable(schema, np.zeros((1, 1, 2)), np.zeros((1, 1)), np.full((1, 1), 1e-300))
    assert m_step_objective(obs, truths, p, include_prior=False) == pytest.approx(
        -0.5 * math.log(2 * math.pi), abs=1e-12)


def test_objective_invariant_to_reciprocal_scaling():
    s = fixed_state(make_schema(["cat", "cont"], rows=2, labels=3),
                    [("u", 0, 0, 1), ("v", 0, 0, 2), ("u", 1, 1, 0.3), ("v", 0, 1, -1.0)],
                    {"u": 0.3, "v": 1.7}, alpha=[0.5, 2.0], beta=[1.5, 0.8])
    p = s.params
    c = 3.7
    scaled = ModelParams(p.workers, p.phi / c, p.alpha * c, p.beta, p.epsilon)
    q0 = m_step_objective(s.observations, s.truths, p)
    assert m_step_objective(s.observations, s.truths, scaled) == pytest.approx(q0, rel=1e-12)


def test_objective_empty_answers_is_prior_term():
    schema = make_schema(["cat", "cont"], rows=2, labels=4)
    p = ModelParams((), [], [1.0, 1.0], [1.0, 1.0])
    obs = obs_of(AnswerSet(schema), p)
    truths = e_step(obs, p, schema)
    expected = -2 * math.log(4) + 2 * (-0.5 * math.log(2 * math.pi) - 0.5)
    assert m_step_objective(obs, truths, p) == pytest.approx(expected, abs=1e-12)


def test_objective_rejects_nonpositive_params():
    s = fixed_state(make_schema(["cont"]), [("u", 0, 0, 1.0)], {"u": 1.0})
    bad = s.params.copy()
    bad.phi = np.array([0.0])
    with pytest.raises(ValueError):
        m_step_objective(s.observations, s.truths, bad)


def _small_mixed(rng, n_workers=4, rows=3, labels=3):
    schema = make_schema(["cat", "cont", "cat", "cont"], rows=rows, labels=labels)
    ws = [f"w{k}" for k in range(n_workers)]
    triples = []
    for w in ws:
        for i in range(rows):
            for j, col in enumerate(schema.columns):
                if rng.random() < 0.7:
                    v = int(rng.integers(labels)) if col.is_categorical else float(rng.normal())
                    triples.append((w, i, j, v))
    phi = dict(zip(ws, rng.lognormal(-1, 0.7, n_workers)))
    return fixed_state(schema, triples, phi, alpha=rng.lognormal(0, 0.3, rows),
                       beta=rng.lognormal(0, 0.3, 4))


def test_gradient_matches_finite_differences(rng):
    for _ in range(5):
        s = _small_mixed(rng)
        g = objective_gradient(s.observations, s.truths, s.params)
        h = 1e-5
        for name, grad in zip(("phi", "alpha", "beta"), g):
            for k in range(len(grad)):
                def q(delta):
                    p = s.params.copy()
                    arr = getattr(p, name)
                    arr[k] *= math.exp(delta)
                    return m_step_objective(s.observations, s.truths, p)
                fd = (q(h) - q(-h)) / (2 * h)
                assert abs(fd - grad[k]) <= 1e-4 * max(1.0, abs(fd))


# -- M-step -----------------------------------------------------------------------


def test_m_step_shrinks_phi_for_accurate_workers(rng):
    schema = make_schema(["cont"] * 3, rows=4)
    truth = rng.normal(size=(4, 3))
    triples = [(w, i, j, truth[i, j] + 1e-3 * rng.normal())
               for w in ("a", "b", "c") for i in range(4) for j in range(3)]
    s = fixed_state(schema, triples, {"a": 1.0, "b": 1.0, "c": 1.0})
    new = m_step(s.observations, s.truths, s.params, InferenceConfig())
    assert np.all(new.phi < s.params.phi)


def test_m_step_single_answer_pins_difficulties():
    s = fixed_state(make_schema(["cont"]), [("u", 0, 0, 0.4)], {"u": 1.0})
    new = m_step(s.observations, s.truths, s.params, InferenceConfig())
    assert new.alpha[0] == 1.0 and new.beta[0] == 1.0
    assert new.phi[0] != 1.0


def test_m_step_normalizes_difficulties(rng):
    s = _small_mixed(rng)
    new = m_step(s.observations, s.truths, s.params, InferenceConfig())
    assert new.alpha.mean() == pytest.approx(1.0, abs=1e-12)
    assert new.beta.mean() == pytest.approx(1.0, abs=1e-12)


def test_m_step_does_not_decrease_objective(rng):
    cfg = InferenceConfig()
    for _ in range(10):
        s = _small_mixed(rng)
        new = m_step(s.observations, s.truths, s.params, cfg)
        q0 = m_step_objective(s.observations, s.truths, s.params)
        q1 = m_step_objective(s.observations, s.truths, new)
        assert q1 >= q0 - cfg.gd_tolerance


def test_joint_and_block_ascent_agree(rng, monkeypatch):
    cfg = InferenceConfig(gd_max_iterations=5000, gd_tolerance=1e-10)
    s = _small_mixed(rng, n_workers=3, rows=2)
    joint = m_step(s.observations, s.truths, s.params, cfg)
    monkeypatch.setattr(inf, "_JOINT_LIMIT", 0)
    block = m_step(s.observations, s.truths, s.params, cfg)
    qj = m_step_objective(s.observations, s.truths, joint)
    qb = m_step_objective(s.observations, s.truths, block)
    assert qj == pytest.approx(qb, abs=1e-5)


@pytest.mark.parametrize("limit,block,coupling",
                         [(10_000, 10_000, 10**9), (0, 10_000, 10**9), (0, 0, 10**9),
                          (0, 10_000, 0), (0, 0, 0)])
def test_newton_system_matches_dense_oracle(rng, monkeypatch, limit, block, coupling):
    monkeypatch.setattr(inf, "_DENSE_LIMIT", limit)
    monkeypatch.setattr(inf, "_DENSE_BLOCK", block)
    monkeypatch.setattr(inf, "_DENSE_COUPLING", coupling)
    W, N, M, A = 5, 40, 6, 400
    size = W + N + M
    sets = (rng.integers(0, W, A), W + rng.integers(0, N, A), W + N + rng.integers(0, M, A))
    groups = [np.zeros(size, bool) for _ in range(3)]
    for g, (a, b) in zip(groups, ((0, W), (W, W + N), (W + N, size))):
        g[a:b] = True
    curv = rng.uniform(0, 2, A)
    free = rng.random(size) < 0.85
    shrink = [(groups[0], 0.7), (groups[1], 1.3), (groups[2], 0.0)]
    full = np.zeros((size, size))
    for a in sets:
        for b in sets:
            np.add.at(full, (a, b), curv)
    for g, lam in shrink:
        idx = np.nonzero(g)[0]
        full[np.ix_(idx, idx)] += lam * (np.eye(len(idx)) - 1.0 / len(idx))
    grad = rng.normal(size=size)
    system = inf._NewtonSystem(sets, groups, curv, shrink, free)
    mat = full[np.ix_(free, free)]
    assert np.allclose(system.scale, np.diag(mat), atol=1e-12)
    ref = np.linalg.solve(mat + np.diag(0.01 * system.scale), grad[free])
    assert np.allclose(system.solve(grad, 0.01), ref, rtol=0, atol=1e-10)


def test_m_step_failure_carries_params(monkeypatch):
    s = fixed_state(make_schema(["cont"]), [("u", 0, 0, 0.4)], {"u": 1.0})
    real = inf._terms

    def broken(suff, logvar, eps, want_grad=True):
        ell, g, h = real(suff, logvar, eps, want_grad)
        return ell * np.nan, g, h

    monkeypatch.setattr(inf, "_terms", broken)
    with pytest.raises(OptimizationError) as err:
        m_step(s.observations, s.truths, s.params, InferenceConfig())
    assert err.value.params is s.params


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(gd_step=0)
    with pytest.raises(ValueError):
        InferenceConfig(max_em_iterations=0)


# -- EM -------------------------------------------------------------------------


def test_run_em_single_worker_reproduces_answers(rng):
    schema = make_schema(["cat", "cont"], rows=5, labels=3)
    truth = [(int(rng.integers(3)), float(rng.uniform(0, 100))) for _ in range(5)]
    answers = make_answers(schema, [("u", i, j, truth[i][j]) for i in range(5) for j in (0, 1)])
    values = np.array([t[1] for t in truth])
    short = run_em(answers, config=InferenceConfig(max_em_iterations=10))
    state = run_em(answers)
    assert np.array_equal(state.estimates()[:, 0], [t[0] for t in truth])
    # The fixed point is phi -> 0 (every answer exact); EM approaches it
    # monotonically, so the continuous estimates close in on the answers.
    gap_short = np.abs(short.estimates()[:, 1] - values)
    gap = np.abs(state.estimates()[:, 1] - values)
    assert state.params.phi[0] < short.params.phi[0]
    assert np.all(gap <= gap_short + 1e-12)
    at_limit = state_from_params(answers, ModelParams(("u",), [1e-4], np.ones(5), np.ones(2)),
                                 state.standardizer)
    assert np.allclose(at_limit.estimates()[:, 1], values, rtol=1e-3)


def test_run_em_majority_wins(rng):
    schema = make_schema(["cat"] * 3, rows=6, labels=3)
    truth = rng.integers(0, 3, size=(6, 3))
    triples = []
    for i in range(6):
        for j in range(3):
            t = int(truth[i, j])
            triples += [("a", i, j, t), ("b", i, j, t), ("c", i, j, (t + 1) % 3)]
    est = extract_truth(run_em(make_answers(schema, triples)))
    assert np.array_equal(est, truth)


def test_run_em_empty_raises():
    with pytest.raises(ValueError):
        run_em(AnswerSet(make_schema(["cat"])))


def test_run_em_default_fixture_converges_monotonically():
    _, _, answers = generate_dataset(GeneratorConfig(seed=3))
    cfg = InferenceConfig()
    state = run_em(answers, config=cfg)
    assert state.converged and state.iteration <= 50
    assert np.all(np.diff(state.history) >= -cfg.gd_tolerance)


def test_run_em_monotone_with_shrinkage():
    _, _, answers = generate_dataset(GeneratorConfig(seed=4, answers_per_task=2))
    cfg = InferenceConfig(difficulty_prior_sd=0.5, phi_prior_sd=1.0)
    state = run_em(answers, config=cfg)
    assert np.all(np.diff(state.history) >= -cfg.gd_tolerance)


def test_run_em_deterministic():
    _, _, answers = generate_dataset(GeneratorConfig(seed=5))
    a, b = run_em(answers), run_em(answers)
    assert np.array_equal(a.estimates(), b.estimates(), equal_nan=True)
    assert a.history == b.history


def test_row_permutation_equivariance():
    table, _, answers = generate_dataset(GeneratorConfig(rows=12, cols=4, seed=6,
                                                         worker_count=8))
    perm = np.random.default_rng(0).permutation(12)
    inv = np.argsort(perm)
    moved = AnswerSet(answers.schema, workers=answers.workers)
    for a in answers:
        moved.add(Answer(a.worker, int(inv[a.row]), a.col, a.value))
    e1 = run_em(answers).estimates()
    e2 = run_em(moved).estimates()
    assert np.allclose(e2[inv], e1, atol=1e-6)


def test_extract_truth_examples():
    schema = make_schema(["cat", "cat", "cont"], rows=1, labels=3)
    s = fixed_state(schema, [("u", 0, 0, 0)], {"u": 1.0})
    s.truths.probs[0, 0, :3] = [0.1, 0.7, 0.2]
    s.truths.probs[0, 1, :3] = [0.5, 0.5, 0.0]
    s.truths.mean[0, 2] = 1.0
    s.standardizer.center[2], s.standardizer.scale[2] = 10.0, 2.0
    est = extract_truth(s)
    assert est[0, 0] == 1 and est[0, 1] == 0 and est[0, 2] == 12.0


# -- incremental update ------------------------------------------------------------


def _snapshot():
    schema = make_schema(["cat", "cont", "cont"], rows=4, labels=3)
    triples = [("a", 0, 0, 1), ("b", 0, 0, 1), ("a", 1, 1, 0.5), ("b", 1, 1, 0.7),
               ("c", 2, 2, -0.2), ("a", 3, 0, 2), ("c", 3, 1, 1.0)]
    return run_em(make_answers(schema, triples))


def test_incremental_update_is_local():
    s = _snapshot()
    nxt = incremental_update(s, Answer("b", 2, 1, 0.3))
    for i in range(4):
        for j in range(3):
            if (i, j) == (2, 1):
                continue
            assert np.array_equal(nxt.truths.probs[i, j], s.truths.probs[i, j])
            assert nxt.truths.mean[i, j] == s.truths.mean[i, j]
            assert nxt.truths.var[i, j] == s.truths.var[i, j]
    assert np.array_equal(nxt.params.alpha, s.params.alpha)
    assert np.array_equal(nxt.params.beta, s.params.beta)
    assert nxt.params.phi[nxt.params.worker_position("a")] == s.params.phi[0]
    assert len(s.answers) == 7 and len(nxt.answers) == 8


def test_incremental_duplicate_answer_shrinks_variance():
    s = _snapshot()
    before = s.truths.var[1, 1]
    nxt = incremental_update(s, Answer("c", 1, 1, 0.6))
    assert nxt.truths.var[1, 1] < before


def test_incremental_new_worker_gets_median_phi():
    s = _snapshot()
    nxt = incremental_update(s, Answer("new", 2, 0, 1))
    assert "new" in nxt.params.workers


def test_incremental_matches_full_em_on_two_cells():
    schema = make_schema(["cont", "cont"], rows=1)
    triples = [("a", 0, 0, 1.0), ("b", 0, 0, 1.2), ("c", 0, 0, 0.9),
               ("a", 0, 1, 5.0), ("b", 0, 1, 5.5), ("c", 0, 1, 4.8)]
    s = run_em(make_answers(schema, triples))
    extra = Answer("d", 0, 0, 1.1)
    inc = incremental_update(s, extra)
    full = run_em(inc.answers)
    # Compare on the full run's standardized scale.
    scale = full.standardizer.scale
    d = np.abs(inc.estimates() - full.estimates()) / scale
    assert np.all(d <= 0.05)
