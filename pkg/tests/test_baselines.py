import numpy as np
import pytest
from hypothesis import given, strategies as st

from tcrowd.baselines import NoEstimate, baseline_estimates, majority_vote, median_vote

from conftest import make_answers, make_schema

A, B = 0, 1


@pytest.mark.parametrize("labels,expected", [([A, A, B], A), ([A, B], A), ([B, B, B], B)])
def test_majority_vote_examples(labels, expected):
    assert majority_vote(labels) == expected


@pytest.mark.parametrize("values,expected", [([1, 2, 100], 2), ([1, 3], 2), ([5], 5)])
def test_median_examples(values, expected):
    assert median_vote(values) == expected


def test_empty_inputs():
    with pytest.raises(NoEstimate):
        majority_vote([])
    with pytest.raises(NoEstimate):
        median_vote([])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=15), st.randoms())
def test_majority_vote_permutation_invariant(labels, r):
    shuffled = list(labels)
    r.shuffle(shuffled)
    assert majority_vote(shuffled) == majority_vote(labels)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=15), st.data())
def test_median_monotone(values, data):
    k = data.draw(st.integers(0, len(values) - 1))
    bump = data.draw(st.floats(0, 1e3))
    raised = list(values)
    raised[k] += bump
    assert median_vote(raised) >= median_vote(values)


def test_baseline_estimates_table():
    schema = make_schema(["cat", "cont"], rows=2, labels=3)
    answers = make_answers(schema, [("a", 0, 0, 2), ("b", 0, 0, 2), ("c", 0, 0, 1),
                                    ("a", 0, 1, 1.0), ("b", 0, 1, 4.0), ("a", 1, 0, 0)])
    both = baseline_estimates(answers)
    assert both[0, 0] == 2 and both[0, 1] == 2.5 and both[1, 0] == 0
    assert np.isnan(both[1, 1])
    mv = baseline_estimates(answers, "mv")
    assert np.isnan(mv[0, 1]) and mv[0, 0] == 2
    with pytest.raises(ValueError):
        baseline_estimates(answers, "mean")
