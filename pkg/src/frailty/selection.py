"""Predictive evaluation of frailty indices and forward variable selection."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .poset import ARResult, ProfilePoset, average_rank, build_poset
from .screening import OutcomeData

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# AUC


def _check_labels(labels: np.ndarray) -> tuple[int, int]:
    n1 = int(labels.sum())
    n0 = int(labels.size - n1)
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    return n1, n0


def auc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney AUC from mid-ranks; ties between classes count one half.

    Computed in integer arithmetic (twice the mid-ranks are integers) and
    divided once, so it equals exhaustive pair counting bit for bit.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    n1, n0 = _check_labels(y)
    twice_ranks = np.rint(2.0 * rankdata(s, method="average")).astype(np.int64)
    u2 = int(twice_ranks[y].sum()) - n1 * (n1 + 1)  # 2 * (wins + ties/2)
    return u2 / (2 * n1 * n0)


def auc_grouped(group_scores: np.ndarray, pos: np.ndarray, neg: np.ndarray) -> float:
    """AUC when subjects come in groups sharing a score (e.g. profiles).

    ``pos``/``neg`` are the per-group counts of positive and negative
    subjects.  Same value as :func:`auc` on the expanded data.
    """
    pos = np.asarray(pos, dtype=np.int64)
    neg = np.asarray(neg, dtype=np.int64)
    n1, n0 = int(pos.sum()), int(neg.sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    vals, inv = np.unique(np.asarray(group_scores, dtype=float), return_inverse=True)
    p = np.bincount(inv.ravel(), weights=pos, minlength=len(vals)).astype(np.int64)
    q = np.bincount(inv.ravel(), weights=neg, minlength=len(vals)).astype(np.int64)
    neg_below = np.cumsum(q) - q
    u2 = int(np.sum(p * (2 * neg_below + q)))
    return u2 / (2 * n1 * n0)


@dataclass
class AUCReport:
    outcome: str
    auc: float
    ci_lo: float
    ci_hi: float
    n: int
    n_events: int
    restricted: bool = False
    degenerate: bool = False


def delong_ci(
    scores: Sequence[float], labels: Sequence[bool], level: float = 0.95, outcome: str = ""
) -> AUCReport:
    """AUC with a DeLong variance and a Wald interval clipped to [0, 1]."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    n1, n0 = _check_labels(y)
    a = auc(s, y)
    x_pos, x_neg = s[y], s[~y]
    r_all = rankdata(s, method="average")
    r_pos = rankdata(x_pos, method="average")
    r_neg = rankdata(x_neg, method="average")
    v10 = (r_all[y] - r_pos) / n0  # placement of each positive among negatives
    v01 = 1.0 - (r_all[~y] - r_neg) / n1
    s10 = np.var(v10, ddof=1) if n1 > 1 else 0.0
    s01 = np.var(v01, ddof=1) if n0 > 1 else 0.0
    var = s10 / n1 + s01 / n0
    if var <= 0 or not np.isfinite(var):
        return AUCReport(outcome, a, a, a, n1 + n0, n1, degenerate=True)
    half = float(norm.ppf(0.5 + level / 2)) * math.sqrt(var)
    return AUCReport(outcome, a, max(0.0, a - half), min(1.0, a + half), n1 + n0, n1)


# --------------------------------------------------------------------------
# scoring


@dataclass(frozen=True)
class PosetConfig:
    method: str = "lpom"
    n_samples: int = 10_000
    seed: int = 0
    exact_cap: int = 10


def _set_seed(base: int, names: Sequence[str]) -> int:
    """Seed that depends on the variable set only, not on its order."""
    h = hashlib.sha256(("\x1f".join(sorted(names))).encode()).digest()
    return int(np.random.SeedSequence([base, int.from_bytes(h[:8], "little")]).generate_state(1)[0])


@dataclass
class FIScore:
    poset: ProfilePoset
    ar: ARResult
    fi: np.ndarray  # per subject

    @property
    def profile_fi(self) -> np.ndarray:
        return self.ar.fi


def compute_fi(values: np.ndarray, names: Sequence[str], config: PosetConfig = PosetConfig()) -> FIScore:
    """Build the poset on ``values`` and score every subject.

    Columns are put in name order first so the result does not depend on the
    order in which variables are listed.
    """
    names = list(names)
    order = sorted(range(len(names)), key=lambda j: names[j])
    P = np.asarray(values)[:, order]
    poset = build_poset(P, [names[j] for j in order])
    ar = average_rank(
        poset,
        config.method,
        n_samples=config.n_samples,
        seed=_set_seed(config.seed, names),
        exact_cap=config.exact_cap,
    )
    if poset.n_subjects == 1:
        fi = np.zeros(1)
    else:
        fi = ar.fi[poset.subject_profile]
    return FIScore(poset, ar, fi)


def outcome_aucs(
    score: FIScore | np.ndarray, outcomes: OutcomeData, with_ci: bool = False, level: float = 0.95
) -> list[AUCReport]:
    """AUC of the FI for each outcome on its evaluation population.

    Outcomes without events (or without non-events) in their population are
    skipped with a warning.
    """
    reports = []
    for k, name in enumerate(outcomes.names):
        y = outcomes.flags[:, k]
        m = outcomes.masks[:, k]
        restricted = not bool(m.all())
        n1 = int(y[m].sum())
        if n1 == 0 or n1 == int(m.sum()):
            logger.warning("outcome %s: no events or no non-events, excluded from the mean", name)
            continue
        if with_ci:
            fi = score.fi if isinstance(score, FIScore) else np.asarray(score)
            rep = delong_ci(fi[m], y[m], level, outcome=name)
            rep.restricted = restricted
        elif isinstance(score, FIScore):
            prof = score.poset.subject_profile[m]
            K = score.poset.n_profiles
            pos = np.bincount(prof, weights=y[m], minlength=K)
            neg = np.bincount(prof, weights=~y[m], minlength=K)
            a = auc_grouped(score.ar.fi, pos, neg)
            rep = AUCReport(name, a, math.nan, math.nan, int(m.sum()), n1, restricted)
        else:
            a = auc(np.asarray(score)[m], y[m])
            rep = AUCReport(name, a, math.nan, math.nan, int(m.sum()), n1, restricted)
        reports.append(rep)
    return reports


def mean_auc(
    values: np.ndarray,
    names: Sequence[str],
    outcomes: OutcomeData,
    config: PosetConfig = PosetConfig(),
) -> tuple[float, list[AUCReport]]:
    """Unweighted mean over outcomes of the AUC of the FI built on ``names``."""
    if len(names) == 0:
        raise ValueError("variable subset must be non-empty")
    score = compute_fi(values, names, config)
    reports = outcome_aucs(score, outcomes)
    if not reports:
        raise ValueError("no outcome has both events and non-events")
    return float(np.mean([r.auc for r in reports])), reports


# --------------------------------------------------------------------------
# forward selection


@dataclass
class TraceStep:
    step: int
    variables_in_model: tuple[str, ...]
    candidate: str
    aucs: dict[str, float]
    mean_auc: float
    accepted: bool
    n_eval: int = 0


@dataclass
class SelectionTrace:
    steps: list[TraceStep] = field(default_factory=list)
    final_set: list[str] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def accepted_steps(self) -> list[TraceStep]:
        return [s for s in self.steps if s.accepted]

    @property
    def final_mean_auc(self) -> float:
        acc = self.accepted_steps
        return acc[-1].mean_auc if acc else math.nan

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for s in self.steps:
            row = {
                "step": s.step,
                "variables_in_model": "+".join(s.variables_in_model),
                "candidate": s.candidate,
                "mean_auc": s.mean_auc,
                "accepted": s.accepted,
                "n_eval": s.n_eval,
            }
            row.update({f"auc_{k}": v for k, v in s.aucs.items()})
            rows.append(row)
        return pd.DataFrame(rows)


@dataclass(frozen=True)
class SelectionConfig:
    epsilon: float = 1e-4
    poset: PosetConfig = PosetConfig()
    threads: int = 1
    max_variables: int | None = None


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def forward_select(
    values: np.ndarray,
    names: Sequence[str],
    outcomes: OutcomeData,
    candidates: Sequence[str] | None = None,
    config: SelectionConfig = SelectionConfig(),
    eval_subset: Callable[[int], np.ndarray] | None = None,
) -> SelectionTrace:
    """Greedy forward selection on the mean AUC of the poset FI.

    Step 1 scores every pair of candidates; each later step tries every
    remaining candidate added to the current set.  The best candidate is
    accepted iff it raises the mean AUC by more than ``config.epsilon``.
    Ties go to the lexicographically smallest candidate (for pairs, the
    smallest sorted pair).  ``eval_subset(step)`` may return the row indices
    to use at a given step (the robustness scenario that perturbs the
    population at every iteration).
    """
    names = list(names)
    cands = sorted(candidates if candidates is not None else names)
    if len(cands) < 2:
        raise ValueError("forward selection needs at least two candidates")
    col = {n: names.index(n) for n in cands}
    values = np.asarray(values)
    trace = SelectionTrace()

    def data_for(step: int):
        if eval_subset is None:
            return values, outcomes
        idx = eval_subset(step)
        return values[idx], outcomes.subset(idx)

    def evaluate(vs, oc, subset):
        m, reps = mean_auc(vs[:, [col[v] for v in subset]], list(subset), oc, config.poset)
        return m, {r.outcome: r.auc for r in reps}

    # step 1: all pairs
    vs, oc = data_for(1)
    pairs = list(itertools.combinations(cands, 2))
    res = _pmap(lambda p: evaluate(vs, oc, p), pairs, config.threads)
    best = min(range(len(pairs)), key=lambda i: (-res[i][0], pairs[i]))
    for i, p in enumerate(pairs):
        trace.steps.append(TraceStep(1, (), "+".join(p), res[i][1], res[i][0], i == best, len(vs)))
    current = list(pairs[best])
    current_auc = res[best][0]
    step = 1
    trace.stop_reason = "no candidates left"
    while True:
        remaining = [c for c in cands if c not in current]
        if not remaining:
            break
        if config.max_variables is not None and len(current) >= config.max_variables:
            trace.stop_reason = "maximum number of variables reached"
            break
        step += 1
        vs, oc = data_for(step)
        if eval_subset is not None:
            # the population changed: re-evaluate the current set on it
            current_auc = evaluate(vs, oc, current)[0]
        res = _pmap(lambda c: evaluate(vs, oc, [*current, c]), remaining, config.threads)
        best = min(range(len(remaining)), key=lambda i: (-res[i][0], remaining[i]))
        gain = res[best][0] - current_auc
        accept = gain > config.epsilon
        for i, c in enumerate(remaining):
            trace.steps.append(
                TraceStep(step, tuple(current), c, res[i][1], res[i][0], accept and i == best, len(vs))
            )
        if not accept:
            trace.stop_reason = (
                f"no remaining variable improves the mean AUC by more than {config.epsilon:g} "
                f"(best {remaining[best]}: {gain:+.6f})"
            )
            break
        current.append(remaining[best])
        current_auc = res[best][0]
    trace.final_set = list(current)
    return trace


# --------------------------------------------------------------------------
# robustness scenarios


@dataclass
class RobustnessResult:
    scenario: str
    runs: list[str]
    traces: list[SelectionTrace]
    inclusion: pd.DataFrame  # variable × run: entry step (0 = not selected)
    mean_aucs: pd.Series
    subsample_log: list[dict] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        """Table-1 shaped view: entry order of each variable per run plus mean AUC."""
        tab = self.inclusion.replace(0, np.nan).astype("Float64")
        tab.loc["Mean of AUCs"] = self.mean_aucs.round(3)
        return tab


def _inclusion(traces, runs, candidates) -> pd.DataFrame:
    data = {}
    for run, tr in zip(runs, traces):
        entry = {}
        acc = tr.accepted_steps
        for s in acc:
            if s.step == 1:
                for v in s.candidate.split("+"):
                    entry[v] = 1
            else:
                entry[s.candidate] = s.step
        data[run] = [entry.get(v, 0) for v in candidates]
    return pd.DataFrame(data, index=list(candidates))


def robustness_run(
    values: np.ndarray,
    names: Sequence[str],
    outcomes: OutcomeData,
    candidates: Sequence[str],
    scenario: str,
    config: SelectionConfig = SelectionConfig(),
    seed: int = 0,
    second: tuple[np.ndarray, Sequence[str], OutcomeData] | None = None,
    n_folds: int = 4,
    n_repeats: int = 2,
    keep_fraction: float = 0.9,
) -> RobustnessResult:
    """Re-run forward selection under a perturbation scenario.

    ``a``: on a second cohort (``second``), next to the reference run.
    ``b``: ``n_repeats`` random partitions into ``n_folds`` folds; each run
    leaves one fold out.
    ``c``: a single run where every step is evaluated on a fresh random
    ``keep_fraction`` of the population.
    """
    values = np.asarray(values)
    n = values.shape[0]
    cands = sorted(candidates)
    traces: list[SelectionTrace] = []
    runs: list[str] = []
    log: list[dict] = []
    if scenario == "a":
        if second is None:
            raise ValueError("scenario a needs a second cohort")
        traces.append(forward_select(values, names, outcomes, cands, config))
        runs.append("cohort1")
        v2, n2, o2 = second
        traces.append(forward_select(v2, n2, o2, cands, config))
        runs.append("cohort2")
    elif scenario == "b":
        for r in range(n_repeats):
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
            folds = np.array_split(rng.permutation(n), n_folds)
            for f in range(n_folds):
                keep = np.sort(np.concatenate([folds[g] for g in range(n_folds) if g != f]))
                log.append({"run": f"r{r + 1}f{f + 1}", "excluded_fold": f + 1, "n_eval": len(keep)})
                traces.append(forward_select(values[keep], names, outcomes.subset(keep), cands, config))
                runs.append(f"r{r + 1}f{f + 1}")
    elif scenario == "c":
        m = int(round(keep_fraction * n))

        def subset(step: int) -> np.ndarray:
            rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(step,)))
            idx = np.sort(rng.choice(n, size=m, replace=False))
            log.append({"run": "c", "step": step, "n_eval": len(idx),
                        "digest": hashlib.sha256(idx.tobytes()).hexdigest()[:16]})
            return idx

        traces.append(forward_select(values, names, outcomes, cands, config, eval_subset=subset))
        runs.append("c")
    else:
        raise ValueError(f"unknown scenario {scenario!r} (expected a, b or c)")
    inclusion = _inclusion(traces, runs, cands)
    means = pd.Series([t.final_mean_auc for t in traces], index=runs, name="mean_auc")
    for run, tr in zip(runs, traces):
        logger.info("robustness %s/%s: %s (%s)", scenario, run, tr.final_set, tr.stop_reason)
    return RobustnessResult(scenario, runs, traces, inclusion, means, log)


__all__ = [
    "AUCReport", "FIScore", "PosetConfig", "RobustnessResult", "SelectionConfig",
    "SelectionTrace", "TraceStep", "auc", "auc_grouped", "compute_fi", "delong_ci",
    "forward_select", "mean_auc", "outcome_aucs", "robustness_run",
]
