import numpy as np
import pytest

from tcrowd.metrics import column_answer_std, error_rate, mnad

from conftest import make_answers, make_schema


def test_error_rate_examples():
    schema = make_schema(["cat"], rows=4)
    truth = np.array([[0], [1], [1], [0]], float)
    assert error_rate(np.array([[0], [1], [0], [0]], float), truth, schema) == 0.25
    assert error_rate(truth, truth, schema) == 0.0
    assert error_rate(1 - truth, truth, schema) == 1.0


def test_error_rate_absent_without_categorical_columns():
    schema = make_schema(["cont"], rows=2)
    assert error_rate(np.zeros((2, 1)), np.zeros((2, 1)), schema) is None


def test_mnad_examples():
    schema = make_schema(["cont"], rows=2)
    answers = make_answers(schema, [("a", 0, 0, -2.0), ("b", 0, 0, 2.0)])
    truth = np.zeros((2, 1))
    assert mnad(truth, truth, answers, schema) == 0.0
    assert mnad(np.ones((2, 1)), truth, answers, schema) == pytest.approx(0.5)


def test_mnad_is_unweighted_column_mean():
    schema = make_schema(["cont", "cont"], rows=1)
    answers = make_answers(schema, [("a", 0, 0, -1.0), ("b", 0, 0, 1.0),
                                    ("a", 0, 1, -1.0), ("b", 0, 1, 1.0)])
    est = np.array([[0.4, 0.6]])
    assert mnad(est, np.zeros((1, 2)), answers, schema) == pytest.approx(0.5)


def test_mnad_skips_constant_column_with_warning():
    schema = make_schema(["cont", "cont"], rows=1)
    answers = make_answers(schema, [("a", 0, 0, 3.0), ("b", 0, 0, 3.0),
                                    ("a", 0, 1, -1.0), ("b", 0, 1, 1.0)])
    with pytest.warns(UserWarning, match="excluded"):
        v = mnad(np.array([[9.0, 0.5]]), np.zeros((1, 2)), answers, schema)
    assert v == pytest.approx(0.5)
    assert np.isnan(column_answer_std(make_answers(schema, [("a", 0, 0, 3.0)]))[0])


def test_missing_estimates_rejected():
    schema = make_schema(["cat"], rows=2)
    with pytest.raises(ValueError):
        error_rate(np.array([[0.0], [np.nan]]), np.zeros((2, 1)), schema)
