import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from policyeval import table as tb
from policyeval.config import ConfigError
from policyeval.table import ColumnSpec, CovariateSchema, SchemaError

SCHEMA_TEXT = """\
column.y.role = outcome
column.y.kind = binary
column.w.role = treatment
column.w.kind = binary
column.country.role = cluster
column.country.kind = categorical
column.age.role = covariate
column.age.kind = numeric
column.wealth.role = covariate
column.wealth.kind = ordinal
column.edu.role = covariate
column.edu.kind = categorical
column.note.role = ignore
column.note.kind = categorical
"""

CSV = """\
# comment lines are skipped
y,w,country,age,wealth,edu,note
0,1,KEN,7,1,Primary,a
1,0,KEN,9,3,noEducation,b
0,1,SLE,12,5,SecondaryPlus,
1,1,SLE,7,2,Primary,c
0,0,UGA,15,4,Primary,d
"""


@pytest.fixture
def schema():
    return CovariateSchema.parse(SCHEMA_TEXT)


@pytest.fixture
def csv_path(tmp_path):
    path = tmp_path / "obs.csv"
    path.write_text(CSV)
    return path


def write(tmp_path, text, name="x.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# --- schema ----------------------------------------------------------------

def test_schema_roles(schema):
    assert (schema.outcome, schema.treatment, schema.cluster) == ("y", "w", "country")
    assert [c.name for c in schema.covariates] == ["age", "wealth", "edu"]


def test_schema_round_trip(schema):
    assert CovariateSchema.parse(schema.dumps()) == schema


def test_schema_levels_round_trip():
    text = SCHEMA_TEXT + "column.wealth.levels = low,mid,high\n"
    s = CovariateSchema.parse(text)
    assert s.column("wealth").levels == ("low", "mid", "high")
    assert CovariateSchema.parse(s.dumps()) == s


@pytest.mark.parametrize("edit, err", [
    (lambda t: t.replace("column.w.role = treatment", "column.w.role = covariate"), SchemaError),
    (lambda t: t + "column.z.role = outcome\ncolumn.z.kind = binary\n", SchemaError),
    (lambda t: t.replace("column.y.kind = binary", "column.y.kind = numeric"), SchemaError),
    (lambda t: t.replace("column.age.kind = numeric", "column.age.kind = text"), SchemaError),
    (lambda t: t + "column.age.colour = red\n", ConfigError),
])
def test_schema_violations(edit, err):
    with pytest.raises(err):
        CovariateSchema.parse(edit(SCHEMA_TEXT))


def test_duplicate_names_rejected():
    cols = (ColumnSpec("y", "outcome", "binary"), ColumnSpec("w", "treatment", "binary"),
            ColumnSpec("c", "cluster", "categorical"), ColumnSpec("y", "covariate", "numeric"))
    with pytest.raises(SchemaError, match="duplicate"):
        CovariateSchema(cols)


# --- ingest ----------------------------------------------------------------

def test_ingest_fixture(schema, csv_path):
    t = tb.ingest(csv_path, schema)
    # row 3 has a blank ignore-role column, which does not count as missing
    assert t.n == 5 and t.dropped == 0
    assert t.cluster_labels == ("KEN", "SLE", "UGA")
    np.testing.assert_array_equal(t.cluster, [0, 0, 1, 1, 2])
    np.testing.assert_array_equal(t.y, [0, 1, 0, 1, 0])
    np.testing.assert_array_equal(t.weight, 1.0)
    assert list(t.covariates.columns) == ["age", "wealth", "edu"]


def test_missing_covariate_drop_row(schema, tmp_path):
    path = write(tmp_path, CSV.replace("0,0,UGA,15,4", "0,0,UGA,NA,4"))
    t = tb.ingest(path, schema)
    assert t.n == 4 and t.dropped == 1
    np.testing.assert_array_equal(t.row_id, [0, 1, 2, 3])
    # UGA disappears; cluster ids stay dense
    assert t.cluster_labels == ("KEN", "SLE")


def test_missing_covariate_error_policy(schema, tmp_path):
    path = write(tmp_path, CSV.replace("0,0,UGA,15,4", "0,0,UGA,,4"))
    with pytest.raises(SchemaError, match=r"row 5, column 'age'"):
        tb.ingest(path, schema, missing_policy="error")


def test_non_binary_treatment_names_row_and_column(schema, tmp_path):
    path = write(tmp_path, CSV.replace("1,0,KEN,9", "1,2,KEN,9"))
    with pytest.raises(SchemaError, match=r"row 2, column 'w'.*'2'"):
        tb.ingest(path, schema)


def test_header_mismatch(schema, tmp_path):
    path = write(tmp_path, CSV.replace("edu,note", "education,note"))
    with pytest.raises(SchemaError, match="header mismatch"):
        tb.ingest(path, schema)


def test_empty_table(schema, tmp_path):
    path = write(tmp_path, "y,w,country,age,wealth,edu,note\n")
    with pytest.raises(SchemaError, match="empty"):
        tb.ingest(path, schema)


def test_non_integer_ordinal_rejected(schema, tmp_path):
    path = write(tmp_path, CSV.replace("0,1,KEN,7,1,", "0,1,KEN,7,1.5,"))
    with pytest.raises(SchemaError, match="ordinal"):
        tb.ingest(path, schema)


def test_quoted_fields(schema, tmp_path):
    path = write(tmp_path, CSV.replace(",a\n", ',"a, quoted"\n'))
    assert tb.ingest(path, schema).n == 5


# --- encode ----------------------------------------------------------------

def test_encode_categorical_and_ordinal(schema, csv_path):
    d = tb.encode(tb.ingest(csv_path, schema))
    # levels sorted: Primary < SecondaryPlus < noEducation; "Primary" dropped
    assert d.feature_names == ["age", "wealth", "edu=SecondaryPlus", "edu=noEducation"]
    np.testing.assert_array_equal(d.matrix[:, 1], [1, 3, 5, 2, 4])
    np.testing.assert_array_equal(d.matrix[:, 2], [0, 0, 1, 0, 0])
    np.testing.assert_array_equal(d.matrix[:, 3], [0, 1, 0, 0, 0])


def test_encode_declared_ordinal_levels(tmp_path):
    s = CovariateSchema.parse(SCHEMA_TEXT.replace("column.wealth.kind = ordinal",
                                                  "column.wealth.kind = ordinal\n"
                                                  "column.wealth.levels = 5,4,3,2,1"))
    d = tb.encode(tb.ingest(write(tmp_path, CSV), s))
    np.testing.assert_array_equal(d.matrix[:, 1], [4, 2, 0, 3, 1])


def test_encode_all_numeric_is_identity():
    s = CovariateSchema((ColumnSpec("y", "outcome", "binary"), ColumnSpec("w", "treatment", "binary"),
                         ColumnSpec("c", "cluster", "categorical"),
                         ColumnSpec("a", "covariate", "numeric"), ColumnSpec("b", "covariate", "numeric")))
    frame = pd.DataFrame({"y": [0, 1], "w": [1, 0], "c": ["x", "y"], "a": [0.5, -1.25], "b": [3.0, 4.0]})
    d = tb.encode(tb.from_frame(frame, s))
    np.testing.assert_array_equal(d.matrix, [[0.5, 3.0], [-1.25, 4.0]])


def test_encode_mapping_reuse_and_unseen_level(schema, csv_path, tmp_path):
    t = tb.ingest(csv_path, schema)
    d = tb.encode(t)
    again = tb.encode(t, d.mapping)
    np.testing.assert_array_equal(again.matrix, d.matrix)
    other = tb.ingest(write(tmp_path, CSV.replace("UGA,15,4,Primary", "UGA,15,4,Tertiary"), "o.csv"), schema)
    with pytest.raises(ValueError, match="Tertiary"):
        tb.encode(other, d.mapping)


def test_encode_ingest_deterministic(schema, csv_path):
    a = tb.encode(tb.ingest(csv_path, schema)).matrix
    b = tb.encode(tb.ingest(csv_path, schema)).matrix
    assert a.tobytes() == b.tobytes()


# --- balance ---------------------------------------------------------------

def _numeric_table(arm0, arm1, extra=None):
    n0, n1 = len(arm0), len(arm1)
    frame = pd.DataFrame({
        "y": [0] * (n0 + n1), "w": [0] * n0 + [1] * n1,
        "c": [f"k{i % 3}" for i in range(n0 + n1)],
        "x": list(arm0) + list(arm1),
        "b": extra if extra is not None else [0] * (n0 + n1),
    })
    s = CovariateSchema((ColumnSpec("y", "outcome", "binary"), ColumnSpec("w", "treatment", "binary"),
                         ColumnSpec("c", "cluster", "categorical"),
                         ColumnSpec("x", "covariate", "numeric"), ColumnSpec("b", "covariate", "binary")))
    return tb.from_frame(frame, s)


def test_balance_hand_values():
    bt = tb.balance_table(_numeric_table([1, 2, 3], [1, 2, 3]))
    row = next(r for r in bt.rows if r.variable == "x")
    assert row.arm0 == (2.0, 1.0) and row.arm1 == row.arm0
    assert "2.00 (1.00)" in bt.to_text()
    zero = next(r for r in bt.rows if r.variable == "b")
    assert zero.arm0 == (0.0, 0.0)


def test_balance_categorical_percentages(schema, csv_path):
    bt = tb.balance_table(tb.ingest(csv_path, schema))
    assert sum(bt.n) == 5
    for arm in ("arm0", "arm1"):
        for var in ("wealth", "edu"):
            pct = sum(getattr(r, arm)[1] for r in bt.rows if r.variable == var)
            assert abs(pct - 100.0) <= 0.01


def test_balance_empty_arm_raises():
    with pytest.raises(ValueError, match="empty arm"):
        tb.balance_table(_numeric_table([], [1.0, 2.0]))


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30),
       st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30))
def test_balance_means_match_single_pass_oracle(a0, a1):
    bt = tb.balance_table(_numeric_table(a0, a1))
    row = next(r for r in bt.rows if r.variable == "x")
    for vals, got in ((a0, row.arm0), (a1, row.arm1)):
        # Welford single-pass mean and variance
        mean, m2 = 0.0, 0.0
        for k, v in enumerate(vals, start=1):
            d = v - mean
            mean += d / k
            m2 += d * (v - mean)
        sd = (m2 / (len(vals) - 1)) ** 0.5
        assert abs(got[0] - mean) <= 1e-12 * max(1.0, abs(mean)) * len(vals)
        assert abs(got[1] - sd) <= 1e-9 * max(1.0, sd)


def test_balance_frame_and_text_agree(schema, csv_path):
    bt = tb.balance_table(tb.ingest(csv_path, schema))
    frame = bt.to_frame()
    assert len(frame) == len(bt.rows)
    assert bt.to_text().splitlines()[1].split() == ["n", "2", "3"]


# --- stratify --------------------------------------------------------------

def _age_table(ages):
    n = len(ages)
    return _numeric_table(ages[: n // 2], ages[n // 2:])


def test_stratify_counts():
    ages = [7, 7, 8, 7, 9, 7, 10, 11, 12, 13]
    strata = tb.stratify(_age_table(ages), "x")
    assert {s.value: s.n for s in strata}[7] == 4
    assert sum(s.n for s in strata) == 10


def test_stratify_eleven_ages():
    ages = list(range(7, 18)) * 3
    assert len(tb.stratify(_age_table(ages), "x")) == 11


def test_stratify_single_value_and_absent_value():
    t = _age_table([5, 5, 5, 5])
    (only,) = tb.stratify(t, "x")
    assert only.n == 4 and only.table.n == t.n
    s = tb.stratify(t, "x", [5, 6])
    assert s[1].empty and s[1].table is None


@given(st.lists(st.integers(0, 4), min_size=4, max_size=40))
def test_stratify_partitions(values):
    t = _age_table(values)
    strata = tb.stratify(t, "x")
    rows = np.concatenate([s.rows for s in strata])
    assert np.array_equal(np.sort(rows), np.arange(t.n))


def test_take_redensifies_clusters(schema, csv_path):
    t = tb.ingest(csv_path, schema)
    sub = t.take([2, 4])
    assert sub.cluster_labels == ("SLE", "UGA")
    np.testing.assert_array_equal(sub.cluster, [0, 1])


def test_lag_column():
    frame = pd.DataFrame({"k": ["a", "b", "a", "b", "a"], "t": [2, 1, 1, 2, 3],
                          "v": [20.0, 1.0, 10.0, 2.0, 30.0]})
    lagged = tb.lag_column(frame, "v", "k", "t")
    assert lagged.tolist()[0] == 10.0 and lagged.tolist()[4] == 20.0
    assert np.isnan(lagged.iloc[1]) and np.isnan(lagged.iloc[2])
    assert lagged.iloc[3] == 1.0
