"""Candidate-marker screening: prevalence, protective odds ratios, stepwise votes.

Logistic models are fitted by IRLS on binomially aggregated data: the design
matrices are small-integer marker levels, so collapsing identical rows turns
a few thousand subjects into at most a few hundred weighted rows with the
same likelihood.
"""

from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.special import expit, log_expit

from .cohort import OUTCOME_NAMES

logger = logging.getLogger(__name__)

SEPARATION_BOUND = 15.0


# --------------------------------------------------------------------------
# outcome data


@dataclass
class OutcomeData:
    """Outcome flags (subject × outcome) plus the evaluation mask of each outcome.

    Onset outcomes are evaluated only on subjects free of the condition at
    baseline; the other outcomes use everyone.
    """

    names: list[str]
    flags: np.ndarray  # bool (n, k)
    masks: np.ndarray  # bool (n, k)

    @classmethod
    def from_cohort(cls, cohort) -> "OutcomeData":
        n = len(cohort)
        flags = np.zeros((n, len(OUTCOME_NAMES)), bool)
        masks = np.ones((n, len(OUTCOME_NAMES)), bool)
        for i, s in enumerate(cohort.subjects):
            o = s.outcomes
            flags[i] = [getattr(o, k) for k in OUTCOME_NAMES]
            masks[i, OUTCOME_NAMES.index("disability_onset")] = not o.baseline_disability
            masks[i, OUTCOME_NAMES.index("dementia_onset")] = not o.baseline_dementia
        return cls(list(OUTCOME_NAMES), flags, masks)

    def __len__(self) -> int:
        return self.flags.shape[0]

    def subset(self, index: np.ndarray) -> "OutcomeData":
        return OutcomeData(self.names, self.flags[index], self.masks[index])

    def column(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        k = self.names.index(name)
        return self.flags[:, k], self.masks[:, k]


# --------------------------------------------------------------------------
# step 1: prevalence


@dataclass
class ScreenResult:
    kept: list[str]
    dropped: list[str]
    statistic: dict[str, float] = field(default_factory=dict)


def prevalence_screen(
    values: np.ndarray, names: Sequence[str], threshold: float = 0.01
) -> ScreenResult:
    """Keep markers present (level > 0) in at least ``threshold`` of subjects."""
    values = np.asarray(values)
    n = values.shape[0]
    prev = {}
    kept, dropped = [], []
    for j, name in enumerate(names):
        p = float((values[:, j] > 0).sum() / n) if n else 0.0
        prev[name] = p
        (kept if p >= threshold else dropped).append(name)
    return ScreenResult(kept, dropped, prev)


# --------------------------------------------------------------------------
# step 2: odds ratios


@dataclass(frozen=True)
class TwoByTwo:
    a: float  # exposed, event
    b: float  # exposed, no event
    c: float  # unexposed, event
    d: float  # unexposed, no event

    def __post_init__(self):
        if min(self.a, self.b, self.c, self.d) < 0:
            raise ValueError("negative cell count")

    @property
    def n(self) -> float:
        return self.a + self.b + self.c + self.d

    @classmethod
    def from_flags(cls, exposed: np.ndarray, event: np.ndarray) -> "TwoByTwo":
        exposed = np.asarray(exposed, bool)
        event = np.asarray(event, bool)
        return cls(
            int((exposed & event).sum()),
            int((exposed & ~event).sum()),
            int((~exposed & event).sum()),
            int((~exposed & ~event).sum()),
        )


class _NotEstimable:
    def __repr__(self) -> str:
        return "NotEstimable"

    def __reduce__(self):
        return "NOT_ESTIMABLE"


NOT_ESTIMABLE = _NotEstimable()


@dataclass(frozen=True)
class OddsRatio:
    estimate: float
    ci_lo: float
    ci_hi: float
    corrected: bool


def odds_ratio(table: TwoByTwo, level: float = 0.95) -> OddsRatio | _NotEstimable:
    """Odds ratio with a Wald interval on the log scale.

    All four cells get +0.5 (Haldane-Anscombe) when any cell is zero.  Two
    zero cells sharing a row or column leave the ratio undefined.
    """
    a, b, c, d = table.a, table.b, table.c, table.d
    if (a == 0 and b == 0) or (c == 0 and d == 0) or (a == 0 and c == 0) or (b == 0 and d == 0):
        return NOT_ESTIMABLE
    corrected = min(a, b, c, d) == 0
    if corrected:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    # point estimate from one division so that OR = 1 is exact on balanced tables
    est = (a * d) / (b * c)
    log_or = math.log(est)
    se = math.sqrt(1 / a + 1 / b + 1 / c + 1 / d)
    z = _z(level)
    return OddsRatio(est, math.exp(log_or - z * se), math.exp(log_or + z * se), corrected)


def _z(level: float) -> float:
    from scipy.stats import norm

    return float(norm.ppf(0.5 + level / 2))


def odds_ratio_matrix(
    values: np.ndarray, names: Sequence[str], outcomes: OutcomeData
) -> dict[str, list[OddsRatio | _NotEstimable]]:
    """OR of each marker (present = level > 0) against each outcome."""
    values = np.asarray(values)
    out = {}
    for j, name in enumerate(names):
        exposed = values[:, j] > 0
        row = []
        for k in range(len(outcomes.names)):
            m = outcomes.masks[:, k]
            row.append(odds_ratio(TwoByTwo.from_flags(exposed[m], outcomes.flags[m, k])))
        out[name] = row
    return out


def is_protective(o: OddsRatio | _NotEstimable, rule: str = "point") -> bool:
    if o is NOT_ESTIMABLE:
        return False
    if rule == "point":
        return o.estimate < 1.0
    if rule == "ci":
        return o.ci_hi < 1.0
    raise ValueError(f"unknown protective rule {rule!r}")


def protective_screen(
    or_matrix: Mapping[str, Sequence[OddsRatio | _NotEstimable | float]],
    rule: str = "point",
    min_outcomes: int = 2,
) -> ScreenResult:
    """Drop variables protective (OR < 1) on at least ``min_outcomes`` outcomes.

    Plain floats are accepted as point estimates.
    """
    kept, dropped, stat = [], [], {}
    for name, row in or_matrix.items():
        n_prot = 0
        for o in row:
            if isinstance(o, (int, float)):
                o = OddsRatio(float(o), float(o), float(o), False)
            n_prot += is_protective(o, rule)
        stat[name] = float(n_prot)
        (dropped if n_prot >= min_outcomes else kept).append(name)
    return ScreenResult(kept, dropped, stat)


# --------------------------------------------------------------------------
# step 3: logistic regression


def balanced_subsample(labels: np.ndarray, rng: np.random.Generator | int) -> np.ndarray:
    """All minority-class subjects plus as many majority-class ones, sampled uniformly.

    Returns sorted indices into ``labels``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    y = np.asarray(labels, bool)
    cases = np.flatnonzero(y)
    controls = np.flatnonzero(~y)
    if len(cases) == 0 or len(controls) == 0:
        raise ValueError("balanced subsample needs at least one case and one control")
    if len(cases) <= len(controls):
        picked = rng.choice(controls, size=len(cases), replace=False)
        idx = np.concatenate([cases, picked])
    else:
        picked = rng.choice(cases, size=len(controls), replace=False)
        idx = np.concatenate([picked, controls])
    return np.sort(idx)


@dataclass
class LogisticFit:
    names: list[str]  # "(Intercept)" first
    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    separated: bool = False
    dropped: list[str] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.coefficients)

    @property
    def aic(self) -> float:
        return 2 * self.k - 2 * self.log_likelihood

    def coef(self, name: str) -> float:
        return float(self.coefficients[self.names.index(name)])


def aggregate_rows(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Collapse identical design rows: returns (unique rows, events, trials)."""
    X = np.asarray(X)
    y = np.asarray(y, dtype=float)
    if X.shape[1] == 0:
        return np.zeros((1, 0)), np.array([y.sum()]), np.array([float(len(y))])
    uniq, inv = np.unique(X, axis=0, return_inverse=True)
    inv = inv.ravel()
    events = np.bincount(inv, weights=y, minlength=len(uniq))
    trials = np.bincount(inv, minlength=len(uniq)).astype(float)
    return uniq.astype(float), events, trials


def _binomial_ll(eta: np.ndarray, events: np.ndarray, trials: np.ndarray) -> float:
    return float(np.sum(events * log_expit(eta) + (trials - events) * log_expit(-eta)))


def fit_logistic(
    X: np.ndarray,
    y: np.ndarray | None = None,
    names: Sequence[str] | None = None,
    *,
    events: np.ndarray | None = None,
    trials: np.ndarray | None = None,
    max_iter: int = 50,
    score_tol: float = 1e-8,
    ll_tol: float = 1e-10,
) -> LogisticFit:
    """Maximum-likelihood logistic regression by IRLS (Newton) with step halving.

    Pass either a 0/1 response ``y`` or aggregated ``events``/``trials`` per
    row of ``X``.  An intercept is always added.  Columns that are linearly
    dependent on earlier ones are dropped with a warning.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = X.shape[1]
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if events is None:
        if y is None:
            raise ValueError("need y or events/trials")
        yv = np.asarray(y, dtype=float)
        events, trials = yv, np.ones_like(yv)
    events = np.asarray(events, float)
    trials = np.asarray(trials, float)
    tot_e, tot_t = events.sum(), trials.sum()
    if tot_e <= 0 or tot_e >= tot_t:
        raise ValueError("logistic fit needs at least one positive and one negative response")

    A = np.column_stack([np.ones(len(X)), X])
    all_names = ["(Intercept)", *names]
    # drop aliased columns, keeping the earliest independent ones
    dropped: list[str] = []
    if p:
        Aw = A * np.sqrt(trials)[:, None]
        _, R, _ = linalg.qr(Aw, mode="economic", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = diag.max() * max(A.shape) * np.finfo(float).eps if len(diag) else 0
        rank = int((diag > tol).sum())
        if rank < A.shape[1]:
            keep = []
            for j in range(A.shape[1]):
                if np.linalg.matrix_rank(Aw[:, keep + [j]], tol=tol) == len(keep) + 1:
                    keep.append(j)
            dropped = [all_names[j] for j in range(A.shape[1]) if j not in set(keep)]
            warnings.warn(f"aliased columns dropped: {dropped}", stacklevel=2)
            A = A[:, keep]
            all_names = [all_names[j] for j in keep]

    beta = np.zeros(A.shape[1])
    beta[0] = math.log(tot_e / (tot_t - tot_e))
    eta = A @ beta
    ll = _binomial_ll(eta, events, trials)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = A.T @ (events - trials * mu)
        if np.max(np.abs(score)) < score_tol:
            converged = True
            it -= 1
            break
        W = trials * mu * (1 - mu)
        info = (A * W[:, None]).T @ A
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, score)[0]
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = A @ cand
            ll_c = _binomial_ll(eta_c, events, trials)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        rel = abs(ll_c - ll) / (abs(ll) + 1e-300)
        beta, eta, ll = cand, eta_c, ll_c
        if rel < ll_tol:
            converged = True
            break
    separated = bool(np.any(np.abs(beta[1:]) > SEPARATION_BOUND))
    coefs = beta
    return LogisticFit(all_names, coefs, converged and not separated, it, ll, separated, dropped)


# --------------------------------------------------------------------------
# stepwise selection and votes


@dataclass
class StepwiseResult:
    selected: list[str]
    fit: LogisticFit
    history: list[tuple[str, str, float]]  # (move, variable, aic)


def stepwise_aic(
    X: np.ndarray,
    y: np.ndarray,
    names: Sequence[str],
    max_steps: int | None = None,
) -> StepwiseResult:
    """Bidirectional stepwise selection by AIC starting from the empty model.

    At every step all single additions and removals are scored; the move with
    the lowest AIC is taken if it beats the current model.  Equal AICs go to
    the lexicographically smallest variable name, so the result does not
    depend on column order.
    """
    names = list(names)
    order = sorted(range(len(names)), key=lambda j: names[j])
    Xs = np.asarray(X)[:, order]
    snames = [names[j] for j in order]
    uniq, events, trials = aggregate_rows(Xs, y)
    cache: dict[frozenset, LogisticFit] = {}

    def fit(cols: frozenset) -> LogisticFit:
        if cols not in cache:
            idx = sorted(cols)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cache[cols] = fit_logistic(
                    uniq[:, idx], names=[snames[j] for j in idx], events=events, trials=trials
                )
        return cache[cols]

    current: frozenset = frozenset()
    cur_fit = fit(current)
    history = [("start", "", cur_fit.aic)]
    steps = max_steps if max_steps is not None else 4 * len(snames) + 4
    for _ in range(steps):
        moves = []
        for j in range(len(snames)):
            if j in current:
                moves.append((fit(current - {j}).aic, snames[j], "remove", current - {j}))
            else:
                moves.append((fit(current | {j}).aic, snames[j], "add", current | {j}))
        if not moves:
            break
        aic, name, kind, new = min(moves, key=lambda m: (m[0], m[1]))
        if not aic < cur_fit.aic:
            break
        current, cur_fit = new, fit(new)
        history.append((kind, name, aic))
    selected = sorted(snames[j] for j in current)
    return StepwiseResult(selected, cur_fit, history)


@dataclass
class VoteResult:
    core_set: list[str]
    votes: pd.DataFrame  # variable × outcome inclusion counts
    n_models: int
    separated_exclusions: int = 0

    def to_csv(self, path) -> None:
        self.votes.to_csv(path, index_label="variable")


def _task_seed(master: int, outcome: int, model: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(outcome, model)))


def stepwise_vote_select(
    values: np.ndarray,
    names: Sequence[str],
    outcomes: OutcomeData,
    n_models: int = 100,
    seed: int = 0,
    vote_share: float = 0.5,
    min_outcomes: int = 3,
    threads: int = 1,
) -> VoteResult:
    """Count how often each variable survives stepwise AIC on balanced subsamples.

    A variable joins the core set when it is selected in at least
    ``vote_share`` of the ``n_models`` models for at least ``min_outcomes``
    outcomes.  Coefficients beyond the separation bound do not earn a vote.
    Each (outcome, model) task has its own seed, so results do not depend on
    ``threads``.
    """
    values = np.asarray(values)
    names = list(names)
    tasks = []
    for k, oname in enumerate(outcomes.names):
        flags, mask = outcomes.flags[:, k], outcomes.masks[:, k]
        idx = np.flatnonzero(mask)
        y = flags[idx]
        n_cases = int(y.sum())
        if n_cases == 0 or n_cases == len(y):
            logger.warning("outcome %s has a single class; no models fitted", oname)
            continue
        if n_cases < 30:
            logger.warning("outcome %s has only %d cases", oname, n_cases)
        for m in range(n_models):
            tasks.append((k, m, idx, y))

    def run(task):
        k, m, idx, y = task
        rng = _task_seed(seed, k, m)
        sub = balanced_subsample(y, rng)
        res = stepwise_aic(values[idx[sub]], y[sub], names)
        voted = [v for v in res.selected if abs(res.fit.coef(v)) <= SEPARATION_BOUND]
        return k, voted, len(res.selected) - len(voted)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    counts = np.zeros((len(names), len(outcomes.names)), dtype=int)
    sep = 0
    for k, voted, n_sep in results:
        sep += n_sep
        for v in voted:
            counts[names.index(v), k] += 1
    votes = pd.DataFrame(counts, index=names, columns=outcomes.names)
    core = core_from_votes(votes, n_models, vote_share, min_outcomes)
    return VoteResult(core, votes, n_models, sep)


def core_from_votes(
    votes: pd.DataFrame, n_models: int, vote_share: float = 0.5, min_outcomes: int = 3
) -> list[str]:
    """Variables with at least ``vote_share * n_models`` votes on ``min_outcomes`` outcomes."""
    need = math.ceil(vote_share * n_models)
    return sorted(str(v) for v in votes.index if int((votes.loc[v] >= need).sum()) >= min_outcomes)
