from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frailty.cohort import OUTCOME_NAMES
from frailty.screening import OutcomeData
from frailty.selection import (
    FIScore,
    PosetConfig,
    SelectionConfig,
    auc,
    auc_grouped,
    compute_fi,
    delong_ci,
    forward_select,
    mean_auc,
    outcome_aucs,
    robustness_run,
)

from conftest import FIXTURES


def brute_auc(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins2 = sum(2 * (p > q) + (p == q) for p in pos for q in neg)
    return wins2 / (2 * len(pos) * len(neg))


def latent_outcomes(rng, latent, n_outcomes=6, intercept=-2.5, masks=None) -> OutcomeData:
    p = 1.0 / (1.0 + np.exp(-(intercept + latent)))
    flags = np.column_stack([rng.random(len(latent)) < p for _ in range(n_outcomes)])
    masks = np.ones_like(flags) if masks is None else masks
    return OutcomeData(list(OUTCOME_NAMES[:n_outcomes]), flags, masks)


def two_signal_data(seed, n=5000, w3=None):
    rng = np.random.default_rng(seed)
    x1 = rng.integers(0, 3, n)
    x2 = (rng.random(n) < 0.3).astype(int)
    if w3 is None:
        noise = (rng.random((n, 2)) < 0.2).astype(int)
        out = latent_outcomes(rng, 0.8 * x1 + 1.0 * x2)
        return np.column_stack([x1, x2, noise]), ["x1", "x2", "noise1", "noise2"], out
    x3 = (rng.random(n) < 0.15).astype(int)
    out = latent_outcomes(rng, 0.8 * x1 + 1.0 * x2 + w3 * x3)
    return np.column_stack([x1, x2, x3]), ["x1", "x2", "x3"], out


# --- AUC -----------------------------------------------------------------------


def test_auc_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_and_ties():
    assert auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        auc([1, 2, 3], [1, 1, 1])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=80))
def test_auc_equals_pair_counting(rows):
    scores = [s / 3 for s, _ in rows]
    labels = [y for _, y in rows]
    if all(labels) or not any(labels):
        return
    assert auc(scores, labels) == brute_auc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(-50, 50), st.booleans()), min_size=2, max_size=60))
def test_auc_monotone_transform_invariance(rows):
    s = np.array([a for a, _ in rows], dtype=float)
    y = np.array([b for _, b in rows])
    if y.all() or not y.any():
        return
    assert auc(s, y) == auc(s ** 3 + 5 * s - 11, y)


def test_auc_grouped_matches_expanded():
    rng = np.random.default_rng(4)
    g = rng.integers(0, 12, 400)
    gs = rng.random(12).round(1)
    y = rng.random(400) < 0.3
    pos = np.bincount(g, weights=y, minlength=12)
    neg = np.bincount(g, weights=~y, minlength=12)
    assert auc_grouped(gs, pos, neg) == auc(gs[g], y)


# --- DeLong ------------------------------------------------------------------------


def test_delong_perfect_separation_flagged():
    r = delong_ci([1, 2, 3, 4], [0, 0, 1, 1])
    assert (r.auc, r.ci_lo, r.ci_hi, r.degenerate) == (1.0, 1.0, 1.0, True)


def test_delong_label_swap_mirrors():
    rng = np.random.default_rng(2)
    y = rng.random(150) < 0.4
    s = rng.normal(size=150) + y
    a, b = delong_ci(s, y), delong_ci(s, ~y)
    assert b.auc == pytest.approx(1 - a.auc, abs=1e-12)
    assert b.ci_lo == pytest.approx(1 - a.ci_hi, abs=1e-12)
    assert b.ci_hi == pytest.approx(1 - a.ci_lo, abs=1e-12)


def test_delong_matches_frozen_bootstrap():
    fx = json.loads((FIXTURES / "delong_bootstrap.json").read_text())
    r = delong_ci(fx["scores"], np.array(fx["labels"], bool))
    assert r.auc == pytest.approx(fx["auc"], abs=1e-12)
    assert abs(r.ci_lo - fx["bootstrap_ci"][0]) <= 0.02
    assert abs(r.ci_hi - fx["bootstrap_ci"][1]) <= 0.02
    assert r.ci_lo <= r.auc <= r.ci_hi


def test_delong_width_shrinks_with_n():
    rng = np.random.default_rng(8)
    y = rng.random(1600) < 0.5
    s = rng.normal(size=1600) + 1.19 * y
    widths = [(lambda r: r.ci_hi - r.ci_lo)(delong_ci(s[:n], y[:n])) for n in (100, 400, 1600)]
    assert widths[0] > widths[1] > widths[2]


# --- FI scoring and mean AUC -----------------------------------------------------------


def test_compute_fi_column_order_invariant():
    rng = np.random.default_rng(0)
    X = rng.integers(0, 3, size=(300, 3))
    a = compute_fi(X, ["a", "b", "c"], PosetConfig("montecarlo", 2000, seed=3))
    b = compute_fi(X[:, [2, 0, 1]], ["c", "a", "b"], PosetConfig("montecarlo", 2000, seed=3))
    assert a.fi.tobytes() == b.fi.tobytes()


def test_mean_auc_identical_outcomes():
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, size=(500, 2))
    y = rng.random(500) < 0.2 + 0.3 * X[:, 0]
    out = OutcomeData(list(OUTCOME_NAMES), np.repeat(y[:, None], 6, axis=1), np.ones((500, 6), bool))
    m, reps = mean_auc(X, ["a", "b"], out)
    assert all(r.auc == reps[0].auc for r in reps)
    assert m == reps[0].auc


def test_outcome_without_events_excluded(caplog):
    rng = np.random.default_rng(1)
    X = rng.integers(0, 2, size=(200, 2))
    flags = rng.random((200, 6)) < 0.3
    flags[:, 5] = False
    out = OutcomeData(list(OUTCOME_NAMES), flags, np.ones_like(flags))
    reps = outcome_aucs(compute_fi(X, ["a", "b"]), out)
    assert len(reps) == 5
    assert "no events" in caplog.text


def test_restricted_evaluation_uses_mask():
    rng = np.random.default_rng(5)
    X = rng.integers(0, 3, size=(400, 2))
    flags = rng.random((400, 6)) < 0.3
    masks = np.ones_like(flags)
    masks[:100, 3] = False
    out = OutcomeData(list(OUTCOME_NAMES), flags, masks)
    score = compute_fi(X, ["a", "b"], PosetConfig("lpom"))
    rep = outcome_aucs(score, out)[3]
    assert rep.restricted and rep.n == 300
    assert rep.auc == auc(score.fi[100:], flags[100:, 3])


def test_grouped_and_direct_auc_agree():
    rng = np.random.default_rng(6)
    X = rng.integers(0, 3, size=(600, 3))
    out = latent_outcomes(rng, X.sum(axis=1) * 0.5)
    score = compute_fi(X, ["a", "b", "c"], PosetConfig("lpom"))
    assert isinstance(score, FIScore)
    for r1, r2 in zip(outcome_aucs(score, out), outcome_aucs(score.fi, out)):
        assert r1.auc == r2.auc


# --- forward selection ------------------------------------------------------------------


def test_constant_candidate_never_selected():
    rng = np.random.default_rng(2)
    n = 2000
    x1, x2 = rng.integers(0, 3, n), rng.integers(0, 2, n)
    out = latent_outcomes(rng, 0.7 * x1 + 0.9 * x2)
    X = np.column_stack([x1, x2, np.ones(n, int)])
    tr = forward_select(X, ["x1", "x2", "const"], out)
    assert "const" not in tr.final_set
    assert sorted(tr.final_set) == ["x1", "x2"]


def test_two_signal_recovery_rate():
    hits = 0
    for seed in range(20):
        X, names, out = two_signal_data(seed)
        tr = forward_select(X, names, out)
        stop_step = max(s.step for s in tr.steps)
        hits += sorted(tr.final_set) == ["x1", "x2"] and stop_step == 2
    assert hits >= 19


def test_trace_accepted_means_strictly_increase():
    X, names, out = two_signal_data(3, w3=0.7)
    tr = forward_select(X, names, out)
    means = [s.mean_auc for s in tr.accepted_steps]
    assert all(b > a for a, b in zip(means, means[1:]))
    assert tr.final_mean_auc == means[-1]


def test_candidate_order_invariance():
    X, names, out = two_signal_data(4)
    perm = [3, 1, 0, 2]
    a = forward_select(X, names, out)
    b = forward_select(X[:, perm], [names[i] for i in perm], out, [names[i] for i in perm])
    assert a.final_set == b.final_set
    assert a.to_frame().equals(b.to_frame())


def test_threads_do_not_change_trace():
    X, names, out = two_signal_data(5)
    a = forward_select(X, names, out, config=SelectionConfig(threads=1))
    b = forward_select(X, names, out, config=SelectionConfig(threads=4))
    assert a.to_frame().equals(b.to_frame())


def test_max_variables():
    X, names, out = two_signal_data(3, w3=0.7)
    tr = forward_select(X, names, out, config=SelectionConfig(max_variables=2))
    assert len(tr.final_set) == 2
    assert tr.stop_reason.startswith("maximum")


# --- robustness -----------------------------------------------------------------------------


def test_scenario_a_same_cohort_same_set():
    X, names, out = two_signal_data(6)
    r = robustness_run(X, names, out, names, "a", second=(X, names, out))
    assert r.traces[0].final_set == r.traces[1].final_set
    assert r.inclusion["cohort1"].equals(r.inclusion["cohort2"])


def test_scenario_b_marginal_variable_drops_out():
    X, names, out = two_signal_data(1, n=4000, w3=0.6)
    r = robustness_run(X, names, out, names, "b", seed=1)
    included = (r.inclusion > 0).sum(axis=1)
    assert r.inclusion.shape == (3, 8)
    assert included["x1"] == included["x2"] == 8
    assert 1 <= included["x3"] < 8
    tab = r.table()
    assert "Mean of AUCs" in tab.index


def test_scenario_c_logs_every_step():
    X, names, out = two_signal_data(7)
    r = robustness_run(X, names, out, names, "c", seed=2)
    steps = max(s.step for s in r.traces[0].steps)
    assert [e["step"] for e in r.subsample_log] == list(range(1, steps + 1))
    assert all(e["n_eval"] == round(0.9 * len(X)) for e in r.subsample_log)
    assert len({e["digest"] for e in r.subsample_log}) == steps


def test_scenario_a_requires_second_cohort():
    X, names, out = two_signal_data(6)
    with pytest.raises(ValueError):
        robustness_run(X, names, out, names, "a")
