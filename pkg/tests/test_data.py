import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rspnkit.data import SequenceDataset, load, save, split, to_evidence
from rspnkit.errors import IndexOutOfRange, ParseError, SchemaViolation

SCHEMA = {"u": 2, "x": 4}


def small():
    seqs = [
        [{"u": 0, "x": 3}, {"u": 1, "x": None}, {"u": None, "x": 2}],
        [{"u": 1, "x": 0}, {"u": 1, "x": 1}],
    ]
    return SequenceDataset(SCHEMA, seqs, ["a", "b"])


def same(a, b):
    return dict(a.schema) == dict(b.schema) and list(a.ids) == list(b.ids) and \
        [[dict(c) for c in s] for s in a.sequences] == [[dict(c) for c in s] for s in b.sequences]


class TestLoad:
    def test_empty_file(self, tmp_path):
        (tmp_path / "e.jsonl").write_text("")
        assert len(load(tmp_path / "e.jsonl")) == 0
        (tmp_path / "e.csv").write_text("")
        assert len(load(tmp_path / "e.csv")) == 0

    @pytest.mark.parametrize("suffix", ["jsonl", "csv"])
    def test_round_trip(self, tmp_path, suffix):
        ds = small()
        save(ds, tmp_path / f"d.{suffix}")
        assert same(load(tmp_path / f"d.{suffix}", schema=SCHEMA), ds)

    def test_jsonl_schema_header_fixes_cardinality(self, tmp_path):
        save(small(), tmp_path / "d.jsonl")
        assert dict(load(tmp_path / "d.jsonl").schema) == SCHEMA

    def test_value_outside_domain(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"schema": [{"name": "u", "cardinality": 2}, {"name": "x", "cardinality": 4}]})
                        + "\n" + json.dumps({"id": "s", "slices": [{"u": 0, "x": 1}, {"u": 0, "x": 4}]}) + "\n")
        with pytest.raises(SchemaViolation, match=r"t=2, x=4"):
            load(path)

    def test_parse_error_has_line_number(self, tmp_path):
        path = tmp_path / "d.jsonl"
        path.write_text(json.dumps({"slices": [{"u": 0}, {"u": 1}]}) + "\n{not json\n")
        with pytest.raises(ParseError) as info:
            load(path)
        assert info.value.line == 2

    def test_csv_parse_errors(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("sequence_id,t,var,value\ns,1,u,0\ns,one,u,1\n")
        with pytest.raises(ParseError) as info:
            load(path)
        assert info.value.line == 3
        path.write_text("id,t,var,value\n")
        with pytest.raises(ParseError):
            load(path)
        path.write_text("sequence_id,t,var,value\ns,1,u,0\ns,3,u,1\n")
        with pytest.raises(ParseError, match="non-contiguous"):
            load(path)

    def test_csv_empty_value_is_missing(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("sequence_id,t,var,value\ns,1,u,0\ns,1,x,\ns,2,u,1\ns,2,x,3\n")
        ds = load(path)
        assert ds.sequences[0][0]["x"] is None
        assert ds.sequences[0][1] == {"u": 1, "x": 3}

    def test_sampler_format(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text(json.dumps({"inputs": [0, 1, 1], "observations": [2, 3, 0], "states": [0, 0, 1]}) + "\n")
        ds = load(path, schema=SCHEMA)
        assert ds.sequences[0] == [{"u": 0, "x": 2}, {"u": 1, "x": 3}, {"u": 1, "x": 0}]

    def test_short_sequence_rejected(self):
        with pytest.raises(SchemaViolation):
            SequenceDataset(SCHEMA, [[{"u": 0, "x": 0}]])


class TestEvidence:
    def test_fully_observed_row(self):
        ev = to_evidence(small(), 1)
        assert ev == {"u_1": 1, "x_1": 0, "u_2": 1, "x_2": 1}

    def test_missing_cell_is_marginalized(self):
        ev = to_evidence(small(), 0)
        assert [k for k, v in ev.items() if v is None] == ["x_2", "u_3"]
        assert not any(k.startswith("z_") for k in ev)

    def test_index_out_of_range(self):
        with pytest.raises(IndexOutOfRange):
            to_evidence(small(), 2)

    def test_columns(self):
        cols = small().columns([0], 3)
        np.testing.assert_array_equal(cols["x_2"], [-1])
        np.testing.assert_array_equal(cols["x_1"], [3])


class TestSplit:
    def dataset(self, n):
        return SequenceDataset(SCHEMA, [[{"u": i % 2, "x": i % 4}] * 2 for i in range(n)])

    def test_near_one(self):
        train, test = split(self.dataset(10), 0.95, 0)
        assert (len(train), len(test)) == (9, 1)

    def test_same_seed_same_split(self):
        a = split(self.dataset(20), 0.5, 4)
        b = split(self.dataset(20), 0.5, 4)
        assert list(a[0].ids) == list(b[0].ids)

    def test_disjoint_and_exhaustive(self):
        train, test = split(self.dataset(17), 0.3, 2)
        assert sorted(list(train.ids) + list(test.ids), key=int) == [str(i) for i in range(17)]
        assert not set(train.ids) & set(test.ids)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            split(self.dataset(4), 1.0, 0)


def test_with_missing_fraction():
    seqs = [[{"u": 0, "x": 1}] * 10 for _ in range(200)]
    ds = SequenceDataset(SCHEMA, seqs).with_missing(["x"], 0.2, 0)
    frac = np.mean([c["x"] is None for s in ds.sequences for c in s])
    assert abs(frac - 0.2) < 0.03
    assert all(c["u"] == 0 for s in ds.sequences for c in s)


cells = st.one_of(st.none(), st.integers(0, 3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.tuples(st.one_of(st.none(), st.integers(0, 1)), cells), min_size=2, max_size=5),
                min_size=1, max_size=6),
       st.sampled_from(["jsonl", "csv"]))
def test_save_load_identity(tmp_path_factory, rows, fmt):
    ds = SequenceDataset(SCHEMA, [[{"u": u, "x": x} for u, x in seq] for seq in rows])
    path = tmp_path_factory.mktemp("rt") / f"d.{fmt}"
    save(ds, path)
    assert same(load(path, schema=SCHEMA), ds)
