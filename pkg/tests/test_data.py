import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from patternkit.data import (
    MAX_COLUMNS,
    DataError,
    Dataset,
    load_csv,
    load_records,
    mask_of,
    observed_columns,
    partition,
    pattern_ids,
    pattern_of,
    save_csv,
)


def test_load_csv_sets_mask(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("y,x1,x2\n1,2,3\n2,NA,4\n3,5,6\n")
    ds = load_csv(f, "y")
    assert ds.mask.sum() == 1 and ds.mask[1, 0] == 1
    assert ds.col_names == ("x1", "x2")
    assert np.isnan(ds.x[1, 0])


def test_load_csv_missing_response_names_row(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("y,x1\n1,2\nNA,3\n")
    with pytest.raises(DataError, match="row 1"):
        load_csv(f, "y")


def test_load_csv_rejects_non_numeric(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("y,x1\n1,abc\n")
    with pytest.raises(DataError, match="non-numeric"):
        load_csv(f, "y")


def test_load_csv_custom_na_token(tmp_path):
    f = tmp_path / "d.csv"
    f.write_text("x1,y\n.,1\n2,3\n")
    ds = load_csv(f, "y", na_token=".")
    assert ds.mask[:, 0].tolist() == [1, 0]


def test_unreadable_file(tmp_path):
    with pytest.raises(DataError):
        load_csv(tmp_path / "absent.csv", "y")


def test_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(7, 3)) * 1e3
    mask = (rng.random((7, 3)) < 0.3).astype(np.uint8)
    ds = Dataset(rng.normal(size=7), x, mask, ("a", "b", "c"), "resp")
    save_csv(ds, tmp_path / "a.csv")
    back = load_csv(tmp_path / "a.csv", "resp")
    assert back.equals(ds)
    save_csv(back, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@given(
    arrays(np.float64, (5, 2), elements=st.floats(-1e300, 1e300, allow_nan=False)),
    arrays(np.uint8, (5, 2), elements=st.integers(0, 1)),
)
def test_round_trip_bit_exact(tmp_path_factory, x, mask):
    ds = Dataset(np.arange(5.0), x, mask, ("u", "v"))
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    save_csv(ds, path)
    back = load_csv(path, "y")
    obs = mask == 0
    assert np.array_equal(back.mask, mask)
    assert np.array_equal(back.x[obs].view(np.int64), x[obs].view(np.int64))


def test_load_records_selects_columns(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text("b,a,extra\n1,NA,9\n")
    x, mask, names = load_records(f, ["a", "b"])
    assert names == ["a", "b"] and mask.tolist() == [[1, 0]] and x[0, 1] == 1.0
    with pytest.raises(DataError, match="zz"):
        load_records(f, ["zz"])


def test_pattern_of_examples():
    assert pattern_of([0, 0]) == 0
    assert pattern_of([1, 0]) == 1
    assert pattern_of([1, 1]) == 3


@given(st.lists(st.integers(0, 1), min_size=1, max_size=MAX_COLUMNS))
def test_pattern_bits(row):
    pid = pattern_of(row)
    assert all(((pid >> j) & 1) == b for j, b in enumerate(row))
    assert list(mask_of(pid, len(row))) == row
    assert pattern_ids(np.array([row]))[0] == pid


def test_partition_examples():
    ds = Dataset(np.zeros(4), np.ones((4, 2)), np.array([[0, 0], [0, 0], [1, 0], [0, 1]]), ("a", "b"))
    idx = partition(ds)
    assert idx.sizes() == {0: 2, 1: 1, 2: 1}
    full = Dataset(np.zeros(5), np.ones((5, 2)), np.zeros((5, 2)), ("a", "b"))
    assert partition(full).sizes() == {0: 5}
    empty = Dataset(np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)), ("a", "b"))
    assert len(partition(empty)) == 0 and empty.n == 0


@given(arrays(np.uint8, st.tuples(st.integers(0, 30), st.integers(1, 6)), elements=st.integers(0, 1)))
def test_partition_is_a_bijection(mask):
    n, p = mask.shape
    ds = Dataset(np.zeros(n), np.ones((n, p)), mask, tuple(f"c{j}" for j in range(p)))
    idx = partition(ds)
    rows = np.concatenate([idx[pid] for pid in idx]) if len(idx) else np.zeros(0, int)
    assert sorted(rows.tolist()) == list(range(n))
    assert list(idx) == sorted(idx)
    for pid in idx:
        assert all(pattern_of(mask[i]) == pid for i in idx[pid])
        assert np.all(np.diff(idx[pid]) > 0)
    # re-partitioning the grouped masks gives the same groups
    assert partition(ds).sizes() == idx.sizes()


def test_observed_columns():
    assert observed_columns(pattern_of([1, 0]), 2) == (1,)
    assert observed_columns(0, 4) == (0, 1, 2, 3)
    assert observed_columns(7, 3) == ()


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros(3), np.zeros((2, 2)), np.zeros((2, 2)), ("a", "b"))
    with pytest.raises(DataError):
        Dataset(np.zeros(2), np.zeros((2, 2)), np.full((2, 2), 2), ("a", "b"))
    with pytest.raises(DataError):
        Dataset(np.array([1.0, np.nan]), np.zeros((2, 2)), np.zeros((2, 2)), ("a", "b"))
    with pytest.raises(DataError):
        Dataset(np.zeros(1), np.zeros((1, 64)), np.zeros((1, 64)), tuple(map(str, range(64))))
    ds = Dataset(np.zeros(2), np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1, 0], [0, 0]]), ("a", "b"))
    assert np.isnan(ds.x[0, 0])
    with pytest.raises(ValueError):
        ds.x[1, 1] = 0.0
