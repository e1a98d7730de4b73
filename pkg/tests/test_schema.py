from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from surrogate.schema import (
    Dataset, RecordError, SchemaError, balance_by_downsampling, domain_size, parse_schema,
    split_dataset, validate_record, validate_rows,
)

from conftest import mk_dataset, mk_schema

EDAD_EXCERPT = """{
  "RELACT": {
    "description": "Current activity status",
    "dtype": "int",
    "values": {"1": "Working", "2": "Unemployed", "3": "Retired", "4": "Permanently disabled",
               "5": "Student", "6": "Homemaker", "7": "Other"}
  },
  "CERTIG": {
    "description": "Has an official disability certificate",
    "dtype": "int",
    "values": {"1": "Yes", "2": "No"}
  },
  "AUDI_7_1": {
    "description": "Hearing difficulty: needs help with a hearing aid",
    "dtype": "int",
    "values": {"1": "Yes", "2": "No", "3": "Not applicable"}
  }
}"""


def test_parse_edad_excerpt():
    s = parse_schema(EDAD_EXCERPT)
    assert s.names == ["RELACT", "CERTIG", "AUDI_7_1"]
    assert s["RELACT"].cardinality == 7
    assert s["RELACT"].codes == tuple(str(i) for i in range(1, 8))
    assert s["CERTIG"].dtype == "integer-coded"


def test_minimal_schema_domain_one():
    s = parse_schema('{"X": {"description": "only", "dtype": "str", "values": {"a": "A"}}}')
    assert domain_size(s) == (1, False)


def test_duplicate_name_reports_variable_and_line():
    text = '{\n"SEX": {"values": {"1": "m"}},\n"SEX": {"values": {"2": "f"}}\n}'
    with pytest.raises(SchemaError) as err:
        parse_schema(text)
    assert err.value.variable == "SEX"
    assert err.value.line == 3


@pytest.mark.parametrize("text, var", [
    ('{"A": {"dtype": "int", "values": {}}}', "A"),
    ('{"A": {"dtype": "float", "values": {"1": "x"}}}', "A"),
    ('{"A": {"dtype": "int", "range": [0, 10]}}', "A"),
])
def test_rejected_variables_name_the_variable(text, var):
    with pytest.raises(SchemaError) as err:
        parse_schema(text)
    assert err.value.variable == var


def test_malformed_document_has_line():
    with pytest.raises(SchemaError) as err:
        parse_schema('{\n"A": {"values": {"1": "x"}\n')
    assert err.value.line is not None


def test_domain_size_examples():
    assert domain_size(mk_schema([2, 4, 5, 9, 9, 9, 4])).count == 116_640
    assert domain_size(mk_schema([2])).count == 2
    assert domain_size(mk_schema([3, 4, 5])).count == 60


def test_domain_size_saturates():
    size = domain_size(mk_schema([1000] * 8))
    assert size.saturated and size.count == 2**63 - 1


def test_validate_record():
    s = mk_schema([2, 2], start=1)
    assert validate_record(s, [" 1", "2 "]) == ("1", "2")
    with pytest.raises(RecordError) as err:
        validate_record(s, ["9", "1"])
    assert err.value.columns == ["V0"]
    with pytest.raises(RecordError):
        validate_record(s, ["1"])


def test_validate_batch_counts():
    s = mk_schema([2, 2], start=1)
    rows = [["1", "2"]] * 7 + [["3", "1"], ["1"], ["x", "y"]]
    ok, bad = validate_rows(s, rows)
    assert len(ok) == 7 and len(bad) == 3
    assert bad[2].columns == ["V0", "V1"]


@pytest.mark.parametrize("n, expected", [(100, (72, 8, 20)), (10, (7, 1, 2))])
def test_split_counts(n, expected):
    ds = mk_dataset(mk_schema([2]), np.zeros(n))
    out = split_dataset(ds, seed=3)
    assert tuple(int((out.splits == k).sum()) for k in ("train", "valid", "test")) == expected


def test_split_deterministic_and_guarded():
    ds = mk_dataset(mk_schema([3]), np.arange(30) % 3)
    assert split_dataset(ds, 5) == split_dataset(ds, 5)
    with pytest.raises(ValueError):
        split_dataset(ds.take(np.arange(9)), 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(10, 2000), st.integers(0, 2**16))
def test_split_within_one_record(n, seed):
    ds = mk_dataset(mk_schema([1]), np.zeros(n))
    out = split_dataset(ds, seed)
    for label, frac in zip(("train", "valid", "test"), (0.72, 0.08, 0.20)):
        assert abs((out.splits == label).sum() - frac * n) < 1


def test_balance_examples():
    s = mk_schema([2])
    ds = mk_dataset(s, [1] * 80 + [0] * 20)
    out = balance_by_downsampling(ds, "V0", seed=1)
    assert np.bincount(out.column("V0")).tolist() == [20, 20]
    even = mk_dataset(s, [0, 1] * 25)
    assert balance_by_downsampling(even, "V0", 0) == even
    with pytest.raises(ValueError):
        balance_by_downsampling(mk_dataset(s, [1] * 10), "V0", 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 1000))
def test_balance_property(n0, n1, seed):
    ds = mk_dataset(mk_schema([2]), [0] * n0 + [1] * n1)
    out = balance_by_downsampling(ds, "V0", seed)
    c = np.bincount(out.column("V0"), minlength=2)
    assert c[0] == c[1] <= min(n0, n1)
    assert out == balance_by_downsampling(ds, "V0", seed)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(
    st.from_regex(r"[A-Z][A-Z0-9_]{0,6}", fullmatch=True),
    st.tuples(st.sampled_from(["int", "str"]),
              st.lists(st.from_regex(r"[0-9a-z]{1,3}", fullmatch=True), min_size=1, max_size=5, unique=True)),
    min_size=1, max_size=5))
def test_schema_round_trip(doc):
    text = json.dumps({k: {"description": f"about {k}", "dtype": dt, "values": {c: c.upper() for c in codes}}
                       for k, (dt, codes) in doc.items()})
    s = parse_schema(text)
    assert parse_schema(s.dumps()) == s


def test_dataset_csv_round_trip_and_reorder():
    s = mk_schema([2, 3], start=1)
    ds = Dataset.from_records(s, [("1", "3"), ("2", "1")])
    assert Dataset.from_csv(s, ds.to_csv()) == ds
    assert Dataset.from_csv(s, "V1,V0\n3,1\n1,2\n") == ds


def test_dataset_is_read_only():
    ds = mk_dataset(mk_schema([2]), [0, 1])
    with pytest.raises(ValueError):
        ds.codes[0, 0] = 1
    with pytest.raises(RecordError):
        mk_dataset(mk_schema([2]), [2])
