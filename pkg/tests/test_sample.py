from __future__ import annotations

import warnings

import numpy as np
import pandas as pd
import pytest

from uqe2s.errors import ValidationError
from uqe2s.sample import (
    AuxSample,
    StudySample,
    merge_samples,
    read_aux_csv,
    read_study_csv,
    validate_overlap,
    write_sample_csv,
)


def _pair(n_s, n_a, d1=1, d2=1, seed=0):
    rng = np.random.default_rng(seed)
    st = StudySample(rng.normal(size=n_s), rng.normal(size=(n_s, d1)), rng.normal(size=(n_s, d2)))
    au = AuxSample(rng.normal(size=n_a), rng.normal(size=(n_a, d1)), rng.normal(size=(n_a, d2)))
    return st, au


def test_merge_counts():
    m = merge_samples(*_pair(2, 3))
    assert m.n == 5 and m.n_s == 2 and m.n_a == 3
    assert m.q0_hat == pytest.approx(0.4)


def test_merge_shapes_preserved():
    m = merge_samples(*_pair(4, 6, d1=4, d2=1))
    assert m.z1.shape == (10, 4) and m.z2.shape == (10, 1)


def test_merge_application_sizes():
    m = merge_samples(*_pair(3504, 1697))
    assert m.n == 5201
    assert m.q0_hat == pytest.approx(0.6737, abs=1e-4)


def test_merge_layout_and_lossless():
    st, au = _pair(5, 7, d1=2, d2=3)
    m = merge_samples(st, au)
    assert np.all(m.r[:5] == 1) and np.all(m.r[5:] == 0)
    assert np.all(np.isnan(m.y_obs[5:])) and np.all(np.isnan(m.x_obs[:5]))
    st2, au2 = m.study(), m.aux()
    np.testing.assert_array_equal(st2.y, st.y)
    np.testing.assert_array_equal(st2.z1, st.z1)
    np.testing.assert_array_equal(au2.x, au.x)
    np.testing.assert_array_equal(au2.z2, au.z2)


def test_merged_is_read_only():
    m = merge_samples(*_pair(3, 3))
    with pytest.raises(ValueError):
        m.z1[0, 0] = 1.0


def test_dimension_mismatch():
    st, _ = _pair(3, 3, d1=1)
    _, au = _pair(3, 3, d1=2)
    with pytest.raises(ValidationError, match="dimensions"):
        merge_samples(st, au)


def test_empty_samples_rejected():
    with pytest.raises(ValidationError, match="empty"):
        StudySample(np.array([]), np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(ValidationError, match="empty"):
        AuxSample(np.array([]), np.zeros((0, 1)), np.zeros((0, 1)))


def test_nonfinite_rows_listed():
    y = np.array([1.0, np.nan, 3.0, 4.0])
    with pytest.raises(ValidationError, match="1"):
        StudySample(y, np.zeros((4, 1)), np.zeros((4, 1)))


def test_merge_aligns_columns_by_name():
    rng = np.random.default_rng(1)
    st = StudySample(rng.normal(size=3), rng.normal(size=(3, 2)), rng.normal(size=(3, 1)), ("z1_a", "z1_b"))
    z1 = rng.normal(size=(4, 2))
    au = AuxSample(rng.normal(size=4), z1[:, ::-1], rng.normal(size=(4, 1)), ("z1_b", "z1_a"))
    m = merge_samples(st, au)
    np.testing.assert_array_equal(m.z1[3:], z1)
    bad = AuxSample(rng.normal(size=4), z1, rng.normal(size=(4, 1)), ("z1_a", "z1_c"))
    with pytest.raises(ValidationError, match="names"):
        merge_samples(st, bad)


def _overlap(study_z1, aux_z1):
    st = StudySample(np.zeros(len(study_z1)), np.c_[study_z1], np.zeros((len(study_z1), 1)))
    au = AuxSample(np.zeros(len(aux_z1)), np.c_[aux_z1], np.zeros((len(aux_z1), 1)))
    return validate_overlap(merge_samples(st, au), warn=False)


def test_overlap_nested_ranges():
    rep = _overlap([0.0, 1.0], [-1.0, 2.0])
    assert rep.flagged == ()


def test_overlap_excess():
    rep = _overlap([0.0, 3.0], [0.0, 2.0])
    assert rep.flagged == ("z1_1",)
    assert rep.excess[0] == pytest.approx(1.0)


def test_overlap_identical_and_warning():
    rep = _overlap([0.0, 1.0, 2.0], [0.0, 1.0, 2.0])
    assert rep.flagged == ()
    st = StudySample(np.zeros(2), np.c_[[0.0, 3.0]], np.zeros((2, 1)))
    au = AuxSample(np.zeros(2), np.c_[[0.0, 2.0]], np.zeros((2, 1)))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        validate_overlap(merge_samples(st, au))
    assert any("support" in str(x.message) for x in w)


def test_csv_roundtrip(tmp_path):
    st, au = _pair(6, 4, d1=2, d2=2)
    write_sample_csv(st, tmp_path / "s.csv")
    write_sample_csv(au, tmp_path / "a.csv")
    st2, au2 = read_study_csv(tmp_path / "s.csv"), read_aux_csv(tmp_path / "a.csv")
    np.testing.assert_array_equal(st2.z1, st.z1)
    np.testing.assert_array_equal(au2.x, au.x)
    assert st2.z1_names == ("z1_1", "z1_2")


def test_csv_missing_cells_reported(tmp_path):
    pd.DataFrame({"y": [1.0, None, 3.0], "z1_1": [0, 1, 2], "z2_1": [1, 1, "a"]}).to_csv(tmp_path / "s.csv",
                                                                                     index=False)
    with pytest.raises(ValidationError, match=r"1, 2"):
        read_study_csv(tmp_path / "s.csv")


def test_csv_schema_errors(tmp_path):
    pd.DataFrame({"x": [1.0], "z1_1": [0], "z2_1": [1]}).to_csv(tmp_path / "s.csv", index=False)
    with pytest.raises(ValidationError, match="'y'"):
        read_study_csv(tmp_path / "s.csv")
    pd.DataFrame({"y": [1.0], "z1_1": [0]}).to_csv(tmp_path / "t.csv", index=False)
    with pytest.raises(ValidationError, match="z2"):
        read_study_csv(tmp_path / "t.csv")
    with pytest.raises(ValidationError, match="not found"):
        read_aux_csv(tmp_path / "missing.csv")
