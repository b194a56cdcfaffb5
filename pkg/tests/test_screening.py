from __future__ import annotations

import logging
import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frailty.cohort import OUTCOME_NAMES
from frailty.screening import (
    NOT_ESTIMABLE,
    OddsRatio,
    OutcomeData,
    TwoByTwo,
    balanced_subsample,
    core_from_votes,
    fit_logistic,
    is_protective,
    odds_ratio,
    odds_ratio_matrix,
    prevalence_screen,
    protective_screen,
    stepwise_aic,
    stepwise_vote_select,
)


def table_data(a, b, c, d):
    """Expand a 2x2 table into (x, y) subject vectors."""
    x = np.r_[np.ones(a + b), np.zeros(c + d)]
    y = np.r_[np.ones(a), np.zeros(b), np.ones(c), np.zeros(d)]
    return x, y


def one_signal_data(seed: int, n: int = 5000):
    rng = np.random.default_rng(seed)
    x = (rng.random(n) < 0.3).astype(int)
    noise = (rng.random((n, 5)) < rng.uniform(0.05, 0.4, 5)).astype(int)
    p = 1 / (1 + np.exp(-(-2.5 + 1.5 * x)))
    flags = np.column_stack([rng.random(n) < p for _ in OUTCOME_NAMES])
    names = ["signal"] + [f"noise{i}" for i in range(1, 6)]
    return np.column_stack([x, noise]), names, OutcomeData(list(OUTCOME_NAMES), flags, np.ones_like(flags))


# -- prevalence ------------------------------------------------------------


def test_prevalence_rules():
    n = 213_689
    v = np.zeros((n, 3), int)
    v[:500, 0] = 1
    v[:, 1] = 2
    v[: math.ceil(0.01 * n), 2] = 1
    res = prevalence_screen(v, ["rare", "everyone", "edge"])
    assert res.dropped == ["rare"]
    assert res.kept == ["everyone", "edge"]
    assert res.statistic["rare"] == pytest.approx(500 / n)


def test_prevalence_exact_boundary():
    v = np.zeros((1000, 2), int)
    v[:10, 0] = 1
    v[:9, 1] = 1
    res = prevalence_screen(v, ["ten", "nine"])
    assert res.kept == ["ten"] and res.dropped == ["nine"]


# -- odds ratios -----------------------------------------------------------


def test_odds_ratio_examples():
    o = odds_ratio(TwoByTwo(10, 90, 5, 95))
    assert o.estimate == pytest.approx(950 / 450)
    assert not o.corrected
    se = math.sqrt(1 / 10 + 1 / 90 + 1 / 5 + 1 / 95)
    assert o.ci_lo == pytest.approx(950 / 450 * math.exp(-1.959964 * se), rel=1e-5)
    assert odds_ratio(TwoByTwo(7, 7, 7, 7)).estimate == 1.0
    h = odds_ratio(TwoByTwo(0, 100, 10, 90))
    assert h.corrected
    assert h.estimate == pytest.approx(0.5 * 90.5 / (100.5 * 10.5))
    assert round(h.estimate, 4) == 0.0429


@pytest.mark.parametrize("cells", [(0, 0, 3, 4), (3, 4, 0, 0), (0, 3, 0, 4), (3, 0, 4, 0)])
def test_odds_ratio_not_estimable(cells):
    assert odds_ratio(TwoByTwo(*cells)) is NOT_ESTIMABLE
    assert not is_protective(NOT_ESTIMABLE)


def test_two_by_two_rejects_negative():
    with pytest.raises(ValueError):
        TwoByTwo(-1, 1, 1, 1)


@given(st.tuples(*[st.integers(1, 10_000)] * 4))
def test_odds_ratio_reciprocity(cells):
    a, b, c, d = cells
    t = TwoByTwo(a, b, c, d)
    assert t.n == a + b + c + d
    assert odds_ratio(t).estimate * odds_ratio(TwoByTwo(c, d, a, b)).estimate == pytest.approx(1.0, rel=1e-12)


def test_odds_ratio_matrix_uses_outcome_mask():
    exposed = np.array([1, 1, 0, 0, 1, 0])
    flags = np.array([[1], [0], [1], [0], [1], [1]], bool)
    masks = np.array([[1], [1], [1], [1], [0], [0]], bool)
    m = odds_ratio_matrix(exposed[:, None], ["x"], OutcomeData(["o"], flags, masks))
    assert m["x"][0] is NOT_ESTIMABLE or m["x"][0].estimate == pytest.approx(1.0)
    # 2x2 on the four evaluable subjects is (1,1,1,1)
    assert m["x"][0].estimate == pytest.approx(1.0) and not m["x"][0].corrected


# -- protective screen -----------------------------------------------------


def test_protective_examples():
    res = protective_screen({
        "one": (1.2, 1.5, 0.9, 1.1, 1.3, 1.4),
        "two": (0.8, 0.7, 1.2, 1.2, 1.2, 1.2),
        "flat": (1.0,) * 6,
    })
    assert res.kept == ["one", "flat"]
    assert res.dropped == ["two"]
    assert res.statistic == {"one": 1.0, "two": 2.0, "flat": 0.0}


def test_protective_not_estimable_counts_as_harmless():
    res = protective_screen({"x": [NOT_ESTIMABLE, NOT_ESTIMABLE, 0.5, 1.2, 1.2, 1.2]})
    assert res.kept == ["x"]


def test_protective_ci_rule():
    wide = OddsRatio(0.8, 0.5, 1.3, False)
    tight = OddsRatio(0.8, 0.7, 0.9, False)
    assert is_protective(wide, "point") and not is_protective(wide, "ci")
    res = protective_screen({"w": [wide] * 6, "t": [tight] * 2 + [wide] * 4}, rule="ci")
    assert res.kept == ["w"] and res.dropped == ["t"]
    with pytest.raises(ValueError):
        is_protective(wide, "sometimes")


# -- balanced subsample ----------------------------------------------------


def test_balanced_subsample_sizes():
    y = np.r_[np.ones(100, bool), np.zeros(10_000, bool)]
    idx = balanced_subsample(y, 3)
    assert len(idx) == 200 and y[idx].sum() == 100
    assert np.array_equal(idx, balanced_subsample(y, 3))
    assert not np.array_equal(idx, balanced_subsample(y, 4))
    assert np.all(np.diff(idx) > 0)
    y2 = np.r_[np.ones(100, bool), np.zeros(60, bool)]
    idx2 = balanced_subsample(y2, 0)
    assert len(idx2) == 120 and y2[idx2].sum() == 60


def test_balanced_subsample_needs_both_classes():
    with pytest.raises(ValueError):
        balanced_subsample(np.ones(5, bool), 0)


@given(st.integers(1, 300), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_balanced_subsample_is_balanced(n1, n0, seed):
    y = np.r_[np.ones(n1, bool), np.zeros(n0, bool)]
    idx = balanced_subsample(y, seed)
    assert y[idx].sum() == (~y[idx]).sum() == min(n1, n0)
    assert len(np.unique(idx)) == len(idx)


# -- logistic regression ---------------------------------------------------


def test_logistic_saturated_two_by_two():
    x, y = table_data(10, 90, 5, 95)
    f = fit_logistic(x, y, ["x"])
    assert f.converged and not f.separated
    assert f.coef("x") == pytest.approx(math.log(950 / 450), abs=1e-6)
    assert f.coef("(Intercept)") == pytest.approx(math.log(5 / 95), abs=1e-6)
    assert round(f.coef("x"), 4) == 0.7472
    assert round(f.coef("(Intercept)"), 4) == -2.9444
    assert f.aic == pytest.approx(2 * f.k - 2 * f.log_likelihood)
    assert f.k == 2


def test_logistic_independent_predictor():
    x, y = table_data(20, 80, 40, 160)
    assert abs(fit_logistic(x, y, ["x"]).coef("x")) < 1e-6


def test_logistic_separation_flagged():
    x, y = table_data(30, 0, 0, 30)
    f = fit_logistic(x, y, ["x"])
    assert f.separated and not f.converged
    assert abs(f.coef("x")) > 15


def test_logistic_quasi_separation_flagged():
    x, y = table_data(30, 0, 10, 30)
    assert fit_logistic(x, y, ["x"]).separated


def test_logistic_drops_aliased_column():
    rng = np.random.default_rng(0)
    x = rng.integers(0, 3, 400)
    y = rng.random(400) < 1 / (1 + np.exp(-(x - 1)))
    with pytest.warns(UserWarning, match="aliased"):
        f = fit_logistic(np.column_stack([x, 2 * x]), y, ["a", "b"])
    assert f.dropped == ["b"] and f.names == ["(Intercept)", "a"]
    ref = fit_logistic(x, y, ["a"])
    assert f.coef("a") == pytest.approx(ref.coef("a"), abs=1e-8)


def test_logistic_matches_aggregated_fit():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 3, (600, 2))
    y = rng.random(600) < 1 / (1 + np.exp(-(X @ [0.6, -0.4] - 0.5)))
    f = fit_logistic(X, y)
    uniq, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.ravel()
    g = fit_logistic(uniq, events=np.bincount(inv, weights=y), trials=np.bincount(inv).astype(float))
    assert np.allclose(f.coefficients, g.coefficients, atol=1e-8)
    assert f.log_likelihood == pytest.approx(g.log_likelihood, rel=1e-10)


def test_logistic_needs_both_classes():
    with pytest.raises(ValueError):
        fit_logistic(np.arange(5.0), np.zeros(5))


@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(1, 400)] * 4))
def test_logistic_slope_is_log_odds_ratio(cells):
    x, y = table_data(*cells)
    f = fit_logistic(x, y, ["x"])
    assert f.coef("x") == pytest.approx(math.log(odds_ratio(TwoByTwo(*cells)).estimate), abs=1e-6)


# -- stepwise and votes ----------------------------------------------------


def test_stepwise_finds_signal_and_tracks_aic():
    X, names, o = one_signal_data(0, n=3000)
    y = o.flags[:, 0]
    res = stepwise_aic(X, y, names)
    assert "signal" in res.selected
    aics = [h[2] for h in res.history]
    assert all(b < a for a, b in zip(aics, aics[1:]))
    assert res.fit.aic == pytest.approx(aics[-1])


def test_stepwise_column_permutation_invariance():
    X, names, o = one_signal_data(5, n=2000)
    y = o.flags[:, 2]
    ref = stepwise_aic(X, y, names)
    perm = [3, 0, 5, 1, 4, 2]
    res = stepwise_aic(X[:, perm], y, [names[j] for j in perm])
    assert res.selected == ref.selected
    assert res.fit.aic == pytest.approx(ref.fit.aic, rel=1e-12)


def test_vote_rule():
    votes = pd.DataFrame(0, index=["a", "b", "c", "d"], columns=list(OUTCOME_NAMES))
    votes.loc["a", OUTCOME_NAMES[:3]] = 60
    votes.loc["b", OUTCOME_NAMES[:2]] = 100
    votes.loc["c", OUTCOME_NAMES[:3]] = 50
    votes.loc["d", OUTCOME_NAMES[:3]] = 49
    assert core_from_votes(votes, 100) == ["a", "c"]


def test_votes_single_signal_recovered():
    X, names, o = one_signal_data(3)
    r = stepwise_vote_select(X, names, o, n_models=100, seed=3)
    assert r.core_set == ["signal"]
    assert (r.votes.loc["signal"] == 100).all()
    assert r.votes.to_numpy().min() >= 0 and r.votes.to_numpy().max() <= 100


def test_votes_thread_and_column_order_invariance():
    X, names, o = one_signal_data(8, n=2000)
    a = stepwise_vote_select(X, names, o, n_models=10, seed=4, threads=1)
    b = stepwise_vote_select(X, names, o, n_models=10, seed=4, threads=4)
    pd.testing.assert_frame_equal(a.votes, b.votes)
    perm = [2, 4, 0, 5, 1, 3]
    c = stepwise_vote_select(X[:, perm], [names[j] for j in perm], o, n_models=10, seed=4)
    pd.testing.assert_frame_equal(c.votes.loc[names], a.votes)
    assert c.core_set == a.core_set


def test_votes_warn_on_few_cases(caplog, tmp_path):
    rng = np.random.default_rng(2)
    n = 400
    X = rng.integers(0, 2, (n, 2))
    flags = np.zeros((n, 2), bool)
    flags[:20, 0] = True
    flags[rng.permutation(n)[:150], 1] = True
    o = OutcomeData(["rare", "common"], flags, np.ones_like(flags))
    with caplog.at_level(logging.WARNING, logger="frailty.screening"):
        r = stepwise_vote_select(X, ["u", "v"], o, n_models=5, seed=0)
    assert "only 20 cases" in caplog.text
    assert list(r.votes.columns) == ["rare", "common"]
    r.to_csv(tmp_path / "votes.csv")
    back = pd.read_csv(tmp_path / "votes.csv", index_col="variable")
    assert back.equals(r.votes)


def test_votes_separated_coefficients_do_not_count():
    n = 600
    rng = np.random.default_rng(3)
    sep = np.zeros(n, int)
    flags = np.zeros((n, 3), bool)
    flags[:100] = True
    sep[:40] = 1  # only cases carry the marker
    other = rng.integers(0, 2, n)
    o = OutcomeData(["o1", "o2", "o3"], flags, np.ones_like(flags))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = stepwise_vote_select(np.column_stack([sep, other]), ["sep", "other"], o, n_models=5, seed=1)
    assert (r.votes.loc["sep"] == 0).all()
    assert r.separated_exclusions > 0
