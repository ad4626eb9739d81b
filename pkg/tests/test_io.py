import json

import numpy as np
import pytest

from tcrowd import io
from tcrowd.core import Answer, AnswerSet, TableSchema, categorical, continuous
from tcrowd.simulator import GeneratorConfig, generate_dataset


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_minimal_dataset_round_trip(tmp_path):
    schema = TableSchema((categorical(0, "planet", ["Mars", "Venus"]),), 1)
    answers = AnswerSet(schema)
    answers.add(Answer("alice", 0, 0, 1))
    io.save_schema(schema, tmp_path / "s.json")
    io.save_answers(answers, tmp_path / "a.csv")
    s2, a2, _ = io.load_dataset(tmp_path / "s.json", tmp_path / "a.csv")
    assert s2 == schema and list(a2) == list(answers)
    io.save_schema(s2, tmp_path / "s2.json")
    io.save_answers(a2, tmp_path / "a2.csv")
    assert (tmp_path / "s.json").read_bytes() == (tmp_path / "s2.json").read_bytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "a2.csv").read_bytes()


def test_generated_dataset_round_trip_bit_identical(tmp_path):
    table, _, answers = generate_dataset(GeneratorConfig(rows=8, cols=4, worker_count=5, seed=3))
    io.save_schema(table.schema, tmp_path / "s.json")
    io.save_answers(answers, tmp_path / "a.csv")
    io.save_truth(table.truth, table.schema, tmp_path / "t.csv")
    schema, a2, truth = io.load_dataset(tmp_path / "s.json", tmp_path / "a.csv",
                                        tmp_path / "t.csv")
    assert [x.value for x in a2] == [x.value for x in answers]
    assert np.array_equal(truth, table.truth)


def test_undeclared_label_reports_line(tmp_path):
    s = write(tmp_path / "s.json", json.dumps(
        {"columns": [{"name": "planet", "kind": "categorical", "labels": ["Mars", "Venus"]}],
         "key": "id", "rows": 2}))
    a = write(tmp_path / "a.csv", "worker,row,col,value\nu,0,planet,Mars\nv,1,planet,Pluto\n")
    with pytest.raises(io.DatasetError, match=r"a\.csv:3: label 'Pluto'") as err:
        io.load_dataset(s, a)
    assert err.value.line == 3


@pytest.mark.parametrize("line,msg", [
    ("u,0,size,nan", "non-finite"),
    ("u,0,size,big", "not a number"),
    ("u,0,weight,1", "unknown column"),
    ("u,9,size,1", "outside"),
    ("u,0,size", "expected 4 fields"),
])
def test_answer_validation_errors(tmp_path, line, msg):
    s = write(tmp_path / "s.json", json.dumps(
        {"columns": [{"name": "size", "kind": "continuous", "range": [0, 10]}], "rows": 2}))
    a = write(tmp_path / "a.csv", f"worker,row,col,value\n{line}\n")
    with pytest.raises(io.DatasetError, match=msg):
        io.load_dataset(s, a)


def test_duplicate_answer_rejected(tmp_path):
    s = write(tmp_path / "s.json", json.dumps(
        {"columns": [{"name": "size", "kind": "continuous"}], "rows": 1}))
    a = write(tmp_path / "a.csv", "worker,row,col,value\nu,0,size,1\nu,0,size,2\n")
    with pytest.raises(io.DatasetError, match=":3:"):
        io.load_dataset(s, a)


def test_bad_header_and_json(tmp_path):
    s = write(tmp_path / "s.json", "{not json")
    with pytest.raises(io.DatasetError, match="invalid JSON"):
        io.load_schema(s)
    s = write(tmp_path / "s.json", json.dumps({"columns": [{"name": "x", "kind": "ordinal"}],
                                              "rows": 1}))
    with pytest.raises(io.DatasetError, match="kind"):
        io.load_schema(s)
    s = write(tmp_path / "s.json", json.dumps({"columns": [{"name": "x", "kind": "continuous"}],
                                              "rows": 1}))
    a = write(tmp_path / "a.csv", "who,row,col,value\n")
    with pytest.raises(io.DatasetError, match="header"):
        io.load_dataset(s, a)


def test_restaurant_shaped_schema(tmp_path):
    doc = {"key": "name", "rows": 203, "columns": [
        {"name": "cuisine", "kind": "categorical", "labels": ["Chinese", "Italian", "Thai"]},
        {"name": "price_level", "kind": "categorical", "labels": ["$", "$$", "$$$"]},
        {"name": "delivery", "kind": "categorical", "labels": ["yes", "no"]},
        {"name": "rating", "kind": "continuous", "range": [0, 5]},
        {"name": "reviews", "kind": "continuous", "range": [0, 10000]},
    ]}
    schema = io.load_schema(write(tmp_path / "r.json", json.dumps(doc)))
    assert schema.n_rows == 203 and schema.n_cols == 5
    assert int(schema.categorical_mask.sum()) == 3


def test_rows_inferred_when_missing(tmp_path):
    s = write(tmp_path / "s.json", json.dumps({"columns": [{"name": "x", "kind": "continuous"}]}))
    a = write(tmp_path / "a.csv", "worker,row,col,value\nu,4,x,1.5\n")
    schema, answers, _ = io.load_dataset(s, a)
    assert schema.n_rows == 5 and len(answers) == 1


def test_truth_duplicates_rejected(tmp_path):
    s = write(tmp_path / "s.json", json.dumps({"columns": [{"name": "x", "kind": "continuous"}],
                                              "rows": 1}))
    schema = io.load_schema(s)
    t = write(tmp_path / "t.csv", "row,col,value\n0,x,1\n0,x,2\n")
    with pytest.raises(io.DatasetError, match="duplicate"):
        io.load_truth(t, schema)


def test_result_tables(tmp_path):
    schema = TableSchema((categorical(0, "c", ["a", "b"]), continuous(1, "x")), 2)
    est = np.array([[1, 0.1], [0, np.nan]])
    io.save_estimates(est, schema, tmp_path / "e.csv", standardized=est * 2)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines == ["row,col,value,value_standardized", "0,c,b,", "0,x,0.1,0.2", "1,c,a,"]
    back = io.load_estimates(tmp_path / "e.csv", schema)
    assert np.array_equal(back, est, equal_nan=True)
    io.save_metrics([("tcrowd", 0.25, None), ("median", None, 0.5)], tmp_path / "m.csv")
    assert io.load_metrics(tmp_path / "m.csv") == [("tcrowd", 0.25, None), ("median", None, 0.5)]
