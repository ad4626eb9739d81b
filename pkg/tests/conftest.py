import math

import numpy as np
import pytest
from scipy.special import erfinv

from tcrowd.core import Answer, AnswerSet, ModelParams, TableSchema, categorical, continuous
from tcrowd.inference import state_from_params


def phi_for_quality(q, epsilon=0.5):
    """Worker variance whose quality erf(eps / sqrt(2 phi)) equals q."""
    return (epsilon / (math.sqrt(2.0) * erfinv(q))) ** 2


def make_schema(kinds, rows=1, labels=2):
    cols = []
    for j, k in enumerate(kinds):
        if k == "cat":
            cols.append(categorical(j, f"c{j}", [f"z{t}" for t in range(labels)]))
        else:
            cols.append(continuous(j, f"x{j}"))
    return TableSchema(tuple(cols), rows)


def make_answers(schema, triples, workers=None):
    out = AnswerSet(schema, workers=workers or ())
    for w, i, j, v in triples:
        out.add(Answer(w, i, j, v))
    return out


def fixed_state(schema, triples, phi: dict, alpha=None, beta=None, epsilon=0.5, workers=None):
    answers = make_answers(schema, triples, workers=workers or tuple(phi))
    ws = answers.workers
    params = ModelParams(
        ws, np.array([phi[w] for w in ws], dtype=float),
        np.ones(schema.n_rows) if alpha is None else np.asarray(alpha, float),
        np.ones(schema.n_cols) if beta is None else np.asarray(beta, float),
        epsilon,
    )
    return state_from_params(answers, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(label: str, passed: bool, detail: str) -> bool:
    line = f"{label}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
