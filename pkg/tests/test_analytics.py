from __future__ import annotations

import datetime as dt
import json
import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import FIXTURES
from frailty.analytics import (
    VENN_REGIONS,
    cci_class,
    charlson_score,
    cohort_charlson,
    deprivation_index,
    deprivation_quintiles,
    describe_fi,
    fi_by_group,
    load_deyo_mapping,
    outcome_tables,
    spearman,
    stability_metrics,
    stratify_quartiles,
    top_fraction_flag,
    top_percentile_table,
    venn_overlap,
)
from frailty.cohort import Code, CodeSystem, Flow, FlowRecord

CHARLSON = json.loads((FIXTURES / "charlson_cases.json").read_text())
DEYO = load_deyo_mapping()


# -- distribution ----------------------------------------------------------


def test_describe_fi_examples():
    s = describe_fi([0.3] * 7)
    assert s.minimum == s.q1 == s.median == s.mean == s.q3 == s.maximum == 0.3
    s = describe_fi([0, 0.25, 0.5, 0.75, 1])
    assert s.median == 0.5 and s.mean == 0.5 and s.q1 == 0.25 and s.q3 == 0.75
    assert len(s.histogram) == 50
    assert s.histogram["count"].sum() == 5
    assert s.histogram["count"].iloc[-1] == 1  # 1.0 lands in the last bin
    assert list(s.as_series().index)[0] == "Minimum"
    with pytest.raises(ValueError):
        describe_fi([])


def test_histogram_bin_width():
    s = describe_fi(np.linspace(0, 1, 101), bin_width=0.1)
    assert len(s.histogram) == 10
    assert s.histogram["share"].sum() == pytest.approx(1.0)


# -- strata ----------------------------------------------------------------


def test_quartiles_distinct_values():
    fi = np.array([0.9, 0.1, 0.4, 0.2, 0.7, 0.3, 0.8, 0.6])
    st_ = stratify_quartiles(fi)
    assert st_.n_subjects == [2, 2, 2, 2]
    assert not st_.degenerate
    assert list(st_.assignment[np.argsort(fi)]) == [0, 0, 1, 1, 2, 2, 3, 3]
    assert st_.frame()["fi_range"].iloc[0].startswith("[0.100")


def test_quartiles_cut_values_go_down():
    fi = np.array([0.0, 0.0, 0.0, 0.0, 0.5, 0.5, 1.0, 1.0])
    with pytest.warns(UserWarning, match="degenerate"):
        st_ = stratify_quartiles(fi, profile_ids=[0, 0, 0, 0, 1, 1, 2, 2])
    assert st_.degenerate
    # cuts are 0, 0.25, 0.625: zeros stay in Q1
    assert st_.n_subjects == [4, 0, 2, 2]
    assert st_.n_profiles == [1, 0, 1, 1]


def test_two_profile_cohort_is_degenerate():
    with pytest.warns(UserWarning):
        st_ = stratify_quartiles([0.2] * 5 + [0.8] * 5)
    assert st_.degenerate and sum(n > 0 for n in st_.n_subjects) == 2


def test_outcome_tables_examples():
    fi = np.arange(8) / 7
    strata = stratify_quartiles(fi)
    out = pd.DataFrame({"all": [True] * 8, "top": [False] * 7 + [True], "none": [False] * 8})
    t = outcome_tables(out, strata)
    assert (t.prevalence.loc["all"] == 100).all()
    assert t.distribution.loc["all"].tolist() == [25.0] * 4
    assert t.distribution.loc["top"].tolist() == [0, 0, 0, 100.0]
    assert t.distribution.loc["none"].isna().all()
    assert t.count_distribution.loc[2, "Quartile 4"] == 100.0
    assert t.stratum_sizes.tolist() == [2, 2, 2, 2]


@given(st.lists(st.floats(0, 1), min_size=4, max_size=60), st.integers(0, 2**31))
def test_distribution_rows_sum_to_100(fi, seed):
    rng = np.random.default_rng(seed)
    n = len(fi)
    out = pd.DataFrame(rng.random((n, 6)) < 0.4, columns=list("abcdef"))
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        strata = stratify_quartiles(fi)
    t = outcome_tables(out, strata)
    assert sum(t.stratum_sizes) == n
    for frame in (t.distribution, t.count_distribution):
        sums = frame.sum(axis=1)[frame.notna().any(axis=1)]
        assert np.allclose(sums, 100.0, atol=1e-9)


def test_top_percentile_table():
    fi = np.array([0.5, 0.9, 0.9, 0.1, 0.3])
    ids = ["e", "b", "a", "c", "d"]
    out = pd.DataFrame({"death": [1, 0, 1, 0, 0]}, dtype=bool)
    t = top_percentile_table(fi, ids, out, thresholds=(1.0, 0.4, 0.2))
    assert t.loc["death", "Top 100%"] == pytest.approx(40.0)
    # top 20% = 1 subject: the tie at 0.9 goes to the lower id "a"
    assert t.loc["death", "Top 20%"] == 100.0
    assert t.loc["death", "Top 40%"] == 50.0
    assert t.loc["n_subjects"].tolist() == [5, 2, 1]
    assert top_fraction_flag(fi, ids, 0.2).tolist() == [False, False, True, False, False]


# -- groups ----------------------------------------------------------------


def test_fi_by_group():
    g = fi_by_group([0.2] * 6, ["a", "a", "b", "b", "c", "c"], mode="mean_ci")
    assert (g["value"] == 0.2).all()
    assert np.allclose(g["ci_hi"] - g["ci_lo"], 0)
    q = fi_by_group([0.1, 0.2, 0.3, 0.7, 0.8, 0.9], [0, 0, 0, 1, 1, 1])
    assert q["value"].tolist() == [0.2, 0.8]
    assert q["ci_lo"].tolist() == pytest.approx([0.15, 0.75])
    one = fi_by_group([0.4, 0.5, 0.6], ["x", "y", "y"], mode="mean_ci")
    assert math.isnan(one.loc[0, "ci_lo"]) and one.loc[0, "n"] == 1
    assert one.loc[1, "ci_lo"] == pytest.approx(0.55 - 1.96 * np.std([0.5, 0.6], ddof=1) / math.sqrt(2))
    with pytest.raises(ValueError):
        fi_by_group([0.1], ["a"], mode="box")


# -- Charlson --------------------------------------------------------------


def test_deyo_mapping_loaded():
    names = {c.name: c.weight for c in DEYO}
    assert len(names) == 17
    assert names["metastatic_solid_tumour"] == 6 and names["aids"] == 6
    assert set(names.values()) == {1, 2, 3, 6}
    assert all(c.matches(c.example_code()) for c in DEYO)


@pytest.mark.parametrize("case", CHARLSON, ids=[c["name"] for c in CHARLSON])
def test_charlson_fixtures(case):
    stays = [[tuple(c) for c in s] for s in case["stays"]]
    res = charlson_score(stays, DEYO)
    assert res.admission_scores == case["scores"]
    assert res.cci == case["cci"]
    assert res.cci_class == case["class"]


def test_charlson_from_records(small_cohort):
    recs = [
        FlowRecord("x", Flow.HOSPITAL_DISCHARGE, dt.date(2018, 2, 1),
                   (Code(CodeSystem.ICD9CM, "8208", 0), Code(CodeSystem.ICD9CM, "4280", 1))),
        FlowRecord("x", Flow.ER_ADMISSION, dt.date(2018, 2, 1),
                   (Code(CodeSystem.ICD9CM, "8208", 0), Code(CodeSystem.ICD9CM, "1970", 1))),
    ]
    assert charlson_score(recs, DEYO).admission_scores == [1]
    cci = cohort_charlson(small_cohort.subset(range(500)), DEYO)
    assert cci.min() >= 0 and len(cci) == 500


def test_cci_classes():
    assert [cci_class(k) for k in range(6)] == ["0", "1", "2", "3plus", "3plus", "3plus"]


CODES = ["4280", "41071", "5821", "4560", "2500", "2504", "1985", "1749", "V434", "4912", "3441", "9999"]


@given(st.lists(st.sampled_from(CODES), min_size=1, max_size=8), st.randoms(use_true_random=False))
def test_charlson_order_and_duplicate_invariance(codes, rnd):
    stay = [(c, i + 1) for i, c in enumerate(codes)]
    ref = charlson_score([stay], DEYO).cci
    shuffled = list(codes)
    rnd.shuffle(shuffled)
    assert charlson_score([[(c, i + 1) for i, c in enumerate(shuffled)]], DEYO).cci == ref
    doubled = [(c, i + 1) for i, c in enumerate(codes + codes)]
    assert charlson_score([doubled], DEYO).cci == ref


# -- Venn ------------------------------------------------------------------


def test_venn_hand_fixture():
    frail = np.isin(np.arange(20), [0, 1, 2, 3, 4])
    comorbid = np.isin(np.arange(20), [3, 4, 5, 6, 7, 8, 9])
    disabled = np.isin(np.arange(20), [4, 8, 10, 11])
    v = venn_overlap(frail, comorbid, disabled)
    expected = {
        "frail only": 15.0, "comorbid only": 20.0, "disabled only": 10.0,
        "frail & comorbid": 5.0, "frail & disabled": 0.0, "comorbid & disabled": 5.0,
        "frail & comorbid & disabled": 5.0, "none": 40.0,
    }
    assert v.to_dict() == expected
    assert list(v.index) == list(VENN_REGIONS)


def test_venn_exclusive_flags():
    idx = np.arange(9)
    v = venn_overlap(idx < 3, (idx >= 3) & (idx < 6), idx >= 6)
    assert v[["frail & comorbid", "frail & disabled", "comorbid & disabled", "frail & comorbid & disabled"]].sum() == 0


@given(st.lists(st.tuples(st.booleans(), st.booleans(), st.booleans()), min_size=1, max_size=200))
def test_venn_sums_to_100(flags):
    f, c, d = map(np.array, zip(*flags))
    assert abs(venn_overlap(f, c, d).sum() - 100.0) <= 1e-9


# -- deprivation -----------------------------------------------------------


def areas_frame(n, vary=None):
    df = pd.DataFrame({"area_id": [f"A{i}" for i in range(n)], "population": [100] * n})
    for f in ("low_education", "unemployment", "rented_dwellings", "single_parent", "housing_density"):
        df[f] = 1.0
    if vary is not None:
        df[vary] = np.arange(n, dtype=float)[::-1]
    return df


def test_deprivation_constant_areas():
    with pytest.warns(UserWarning):
        res = deprivation_quintiles(areas_frame(5), ["A0", "A1", "A2"], [0.1, 0.2, 0.3])
    assert (res.areas["di"] == 0).all()
    assert res.degenerate and set(res.subject_quintile) == {1}


def test_deprivation_single_factor_ordering():
    with pytest.warns(UserWarning, match="constant"):
        di = deprivation_index(areas_frame(6, vary="unemployment"))
    assert list(np.argsort(di["di"].to_numpy())) == list(np.argsort(di["unemployment"].to_numpy()))
    assert di["di"].mean() == pytest.approx(0.0, abs=1e-12)


def test_deprivation_quintiles_and_exclusions():
    areas = areas_frame(10)
    areas["unemployment"] = np.arange(10.0)
    subj = [f"A{i % 10}" for i in range(100)] + [None, "ZZ"]
    fi = [i % 10 / 10 for i in range(100)] + [0.5, 0.5]
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = deprivation_quintiles(areas, subj, fi)
    assert res.n_excluded == 2
    assert np.bincount(res.subject_quintile)[1:].tolist() == [20] * 5
    assert res.summary["value"].is_monotonic_increasing


# -- stability -------------------------------------------------------------


def test_spearman_examples():
    assert spearman([1, 2, 3, 4, 5], [1, 3, 2, 4, 5]).rho == pytest.approx(0.9)
    assert spearman([1, 2, 3], [1, 2, 3]).rho == pytest.approx(1.0)
    assert spearman([1, 2, 3, 4], [4, 3, 2, 1]).rho == pytest.approx(-1.0)
    u = spearman([1, 1, 1], [1, 2, 3])
    assert u.undefined and math.isnan(u.rho)


def test_stability_metrics():
    ids1 = ["a", "b", "c", "d", "e", "f"]
    fi1 = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    p1 = np.array([[0], [1], [2], [3], [4], [5]])
    ids2 = ["f", "e", "d", "c", "b", "z"]
    fi2 = [0.6, 0.5, 0.2, 0.4, 0.25, 0.9]
    p2 = np.array([[5], [4], [1], [3], [1], [9]])
    res = stability_metrics(ids1, fi1, p1, ids2, fi2, p2)
    assert res.n_shared == 5
    assert res.stable_profiles.rho == pytest.approx(1.0) and res.stable_profiles.n == 3
    assert res.changed_profiles.undefined  # only two changers
    assert list(res.frame()["subset"]) == ["all shared subjects", "same profile", "changed profile"]
    with pytest.raises(ValueError):
        stability_metrics(["a"], [0.1], p1[:1], ["a"], [0.1], p1[:1])
