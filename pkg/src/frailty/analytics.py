"""Descriptive and validation analyses of a scored cohort."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from .cohort import PREVALENT_OUTCOME_NAMES, CodeSystem, Flow, FlowRecord
from .markers import CodePattern, MatchKind, normalize_code

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# distribution


@dataclass
class FISummary:
    minimum: float
    q1: float
    median: float
    mean: float
    q3: float
    maximum: float
    histogram: pd.DataFrame  # bin_lo, bin_hi, count, share

    def as_series(self) -> pd.Series:
        return pd.Series({
            "Minimum": self.minimum, "1st Quartile": self.q1, "Median": self.median,
            "Mean": self.mean, "3rd Quartile": self.q3, "Maximum": self.maximum,
        })


def describe_fi(fi: Sequence[float], bin_width: float = 0.02) -> FISummary:
    x = np.asarray(fi, dtype=float)
    if x.size == 0:
        raise ValueError("empty FI vector")
    n_bins = int(math.ceil(round(1.0 / bin_width, 9)))
    edges = np.linspace(0.0, n_bins * bin_width, n_bins + 1)
    counts, _ = np.histogram(np.clip(x, 0.0, edges[-1]), bins=edges)
    hist = pd.DataFrame({
        "bin_lo": edges[:-1], "bin_hi": edges[1:], "count": counts, "share": counts / x.size,
    })
    q1, med, q3 = np.quantile(x, [0.25, 0.5, 0.75])
    return FISummary(float(x.min()), float(q1), float(med), float(x.mean()), float(q3), float(x.max()), hist)


# --------------------------------------------------------------------------
# quartile strata


@dataclass
class Strata:
    labels: list[str]
    edges: np.ndarray  # lower bound of Q1 .. upper bound of Q4 (5 values)
    assignment: np.ndarray  # stratum index per subject
    n_subjects: list[int]
    n_profiles: list[int]
    degenerate: bool

    def frame(self) -> pd.DataFrame:
        rng = [f"[{self.edges[0]:.3f} - {self.edges[1]:.3f}]"] + [
            f"({self.edges[k]:.3f} - {self.edges[k + 1]:.3f}]" for k in range(1, len(self.labels))
        ]
        return pd.DataFrame({
            "stratum": self.labels, "fi_range": rng,
            "n_subjects": self.n_subjects, "n_profiles": self.n_profiles,
        })


def stratify_quartiles(fi: Sequence[float], profile_ids: Sequence[int] | None = None) -> Strata:
    """Split at the empirical quartiles; values equal to a cut go to the lower stratum."""
    x = np.asarray(fi, dtype=float)
    if x.size == 0:
        raise ValueError("empty FI vector")
    cuts = np.quantile(x, [0.25, 0.5, 0.75])
    assignment = np.searchsorted(cuts, x, side="left")
    edges = np.r_[x.min(), cuts, x.max()]
    prof = np.asarray(profile_ids) if profile_ids is not None else x
    n_sub, n_prof = [], []
    for k in range(4):
        m = assignment == k
        n_sub.append(int(m.sum()))
        n_prof.append(int(len(np.unique(prof[m]))))
    degenerate = len(np.unique(x)) < 4
    if degenerate:
        warnings.warn("fewer than 4 distinct FI values: degenerate quartile strata", stacklevel=2)
    return Strata([f"Quartile {k + 1}" for k in range(4)], edges, assignment, n_sub, n_prof, degenerate)


def outcome_frame(cohort) -> pd.DataFrame:
    """Prevalent-version outcome flags (one column per outcome), indexed by subject id."""
    rows = {}
    for name in PREVALENT_OUTCOME_NAMES:
        rows[name] = [bool(getattr(s.outcomes, name)) for s in cohort.subjects]
    return pd.DataFrame(rows, index=cohort.ids)


@dataclass
class StratumTable:
    prevalence: pd.DataFrame  # outcome × (Total, Q1..Q4), percent
    distribution: pd.DataFrame  # outcome × (Q1..Q4), percent of events, rows sum to 100
    count_distribution: pd.DataFrame  # n outcomes (0..6) × (Q1..Q4), percent across strata
    stratum_sizes: pd.Series


def outcome_tables(outcomes: pd.DataFrame, strata: Strata) -> StratumTable:
    flags = outcomes.to_numpy(dtype=bool)
    a = strata.assignment
    labels = strata.labels
    sizes = np.array([(a == k).sum() for k in range(len(labels))])
    prev = {"Total": flags.mean(axis=0) * 100}
    for k, lab in enumerate(labels):
        m = a == k
        prev[lab] = flags[m].mean(axis=0) * 100 if m.any() else np.full(flags.shape[1], np.nan)
    prevalence = pd.DataFrame(prev, index=outcomes.columns)

    dist = np.zeros((flags.shape[1], len(labels)))
    for k in range(len(labels)):
        dist[:, k] = flags[a == k].sum(axis=0)
    tot = dist.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        distribution = pd.DataFrame(np.where(tot > 0, dist / tot * 100, np.nan),
                                    index=outcomes.columns, columns=labels)

    n_out = flags.sum(axis=1)
    cnt = np.zeros((flags.shape[1] + 1, len(labels)))
    for k in range(len(labels)):
        cnt[:, k] = np.bincount(n_out[a == k], minlength=flags.shape[1] + 1)
    tot = cnt.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        count_distribution = pd.DataFrame(np.where(tot > 0, cnt / tot * 100, np.nan),
                                          index=range(flags.shape[1] + 1), columns=labels)
    count_distribution.index.name = "n_outcomes"
    return StratumTable(prevalence, distribution, count_distribution, pd.Series(sizes, index=labels))


def top_percentile_table(
    fi: Sequence[float],
    subject_ids: Sequence[str],
    outcomes: pd.DataFrame,
    thresholds: Sequence[float] = (0.25, 0.10, 0.05, 0.02, 0.01),
) -> pd.DataFrame:
    """Outcome prevalence (percent) among the ceil(t*N) frailest subjects.

    Subjects are ordered by FI descending, then subject id ascending, so
    boundary ties are resolved the same way every time.
    """
    x = np.asarray(fi, dtype=float)
    ids = np.asarray(subject_ids, dtype=str)
    order = np.lexsort((ids, -x))
    flags = outcomes.to_numpy(dtype=bool)
    rows = {}
    for t in thresholds:
        k = int(math.ceil(round(t * len(x), 9)))
        sel = order[:k]
        label = f"Top {t * 100:g}%"
        rows[label] = flags[sel].mean(axis=0) * 100 if k else np.full(flags.shape[1], np.nan)
    out = pd.DataFrame(rows, index=outcomes.columns)
    out.loc["n_subjects"] = [int(math.ceil(round(t * len(x), 9))) for t in thresholds]
    return out


# --------------------------------------------------------------------------
# group summaries


def fi_by_group(fi: Sequence[float], groups: Sequence, mode: str = "quartiles") -> pd.DataFrame:
    """Per-group FI summary in long format (group, statistic, value, ci_lo, ci_hi).

    ``mode="quartiles"`` gives median with Q1/Q3 as the interval;
    ``mode="mean_ci"`` gives the mean with a normal 95% interval (no interval
    for single-subject groups).
    """
    x = np.asarray(fi, dtype=float)
    g = pd.Series(list(groups))
    rows = []
    for key in sorted(g.unique(), key=lambda v: (str(type(v)), v)):
        v = x[(g == key).to_numpy()]
        if mode == "quartiles":
            q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
            rows.append((key, "median", med, q1, q3, len(v)))
        elif mode == "mean_ci":
            mean = v.mean()
            if len(v) > 1:
                half = 1.96 * v.std(ddof=1) / math.sqrt(len(v))
                rows.append((key, "mean", mean, mean - half, mean + half, len(v)))
            else:
                rows.append((key, "mean", mean, math.nan, math.nan, 1))
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return pd.DataFrame(rows, columns=["group", "statistic", "value", "ci_lo", "ci_hi", "n"])


# --------------------------------------------------------------------------
# Charlson comorbidity (Deyo adaptation)


@dataclass(frozen=True)
class DeyoCondition:
    name: str
    weight: int
    patterns: tuple[CodePattern, ...]

    def matches(self, code: str) -> bool:
        norm = normalize_code(code)
        return any(p.code_matches(norm) for p in self.patterns)

    def example_code(self) -> str:
        p = self.patterns[0]
        return p.ranges[0][0] if p.match is MatchKind.RANGE else p.values[0]


def load_deyo_mapping(path: str | Path | None = None) -> list[DeyoCondition]:
    """Read the (condition, weight, match, lo, hi) table."""
    if path is None:
        text = resources.files("frailty.data").joinpath("deyo_icd9.csv").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    rows: dict[str, list] = {}
    weights: dict[str, int] = {}
    for r in csv.DictReader(text.splitlines()):
        name = r["condition"].strip()
        w = int(r["weight"])
        if weights.setdefault(name, w) != w:
            raise ValueError(f"condition {name} has conflicting weights")
        kind = MatchKind(r["match"].strip())
        if kind is MatchKind.RANGE:
            pat = CodePattern(Flow.HOSPITAL_DISCHARGE, CodeSystem.ICD9CM, kind,
                              ranges=((r["lo"].strip(), r["hi"].strip()),))
        else:
            pat = CodePattern(Flow.HOSPITAL_DISCHARGE, CodeSystem.ICD9CM, kind, values=(r["lo"].strip(),))
        rows.setdefault(name, []).append(pat)
    return [DeyoCondition(n, weights[n], tuple(p)) for n, p in rows.items()]


def charlson_admission_score(codes: Iterable[tuple[str, int]], mapping: Sequence[DeyoCondition]) -> int:
    """Sum of weights of the distinct conditions among concomitant diagnoses.

    ``codes`` are (code, position) pairs; position 0 (primary) is ignored.
    """
    secondary = [normalize_code(c) for c, pos in codes if pos >= 1]
    return sum(cond.weight for cond in mapping if any(cond.matches(c) for c in secondary))


@dataclass
class CharlsonResult:
    admission_scores: list[int]
    cci: int

    @property
    def cci_class(self) -> str:
        return cci_class(self.cci)


def cci_class(score: int) -> str:
    return "3plus" if score >= 3 else str(int(score))


def charlson_score(
    hospitalisations: Iterable[FlowRecord | Sequence[tuple[str, int]]],
    mapping: Sequence[DeyoCondition] | None = None,
) -> CharlsonResult:
    """Charlson index of a subject: maximum admission score over the given stays.

    Each stay is a discharge :class:`FlowRecord` or a list of (code, position).
    """
    mapping = mapping if mapping is not None else load_deyo_mapping()
    scores = []
    for h in hospitalisations:
        if isinstance(h, FlowRecord):
            if h.flow is not Flow.HOSPITAL_DISCHARGE:
                continue
            codes = [(c.code, c.position) for c in h.codes if c.system is CodeSystem.ICD9CM]
        else:
            codes = list(h)
        scores.append(charlson_admission_score(codes, mapping))
    return CharlsonResult(scores, max(scores) if scores else 0)


def cohort_charlson(cohort, mapping: Sequence[DeyoCondition] | None = None) -> np.ndarray:
    """CCI per subject from its outcome-year hospital discharges."""
    mapping = mapping if mapping is not None else load_deyo_mapping()
    return np.array([
        charlson_score([r for r in s.outcome_records if r.flow is Flow.HOSPITAL_DISCHARGE], mapping).cci
        for s in cohort.subjects
    ], dtype=int)


# --------------------------------------------------------------------------
# Venn overlap


VENN_REGIONS = (
    "frail only", "comorbid only", "disabled only",
    "frail & comorbid", "frail & disabled", "comorbid & disabled",
    "frail & comorbid & disabled", "none",
)


def venn_overlap(frail: Sequence[bool], comorbid: Sequence[bool], disabled: Sequence[bool]) -> pd.Series:
    """Percent of the cohort in each region of the three-set diagram (plus none)."""
    f = np.asarray(frail, bool)
    c = np.asarray(comorbid, bool)
    d = np.asarray(disabled, bool)
    n = len(f)
    masks = [
        f & ~c & ~d, ~f & c & ~d, ~f & ~c & d,
        f & c & ~d, f & ~c & d, ~f & c & d,
        f & c & d, ~f & ~c & ~d,
    ]
    return pd.Series([m.sum() / n * 100 for m in masks], index=list(VENN_REGIONS), name="percent")


def top_fraction_flag(fi: Sequence[float], subject_ids: Sequence[str], fraction: float = 0.10) -> np.ndarray:
    """Flag the ceil(fraction*N) frailest subjects (ties by subject id)."""
    x = np.asarray(fi, dtype=float)
    order = np.lexsort((np.asarray(subject_ids, dtype=str), -x))
    out = np.zeros(len(x), bool)
    out[order[: int(math.ceil(round(fraction * len(x), 9)))]] = True
    return out


# --------------------------------------------------------------------------
# deprivation


DEPRIVATION_FACTORS = (
    "low_education", "unemployment", "rented_dwellings", "single_parent", "housing_density",
)


def deprivation_index(areas: pd.DataFrame, weights: pd.Series | None = None) -> pd.DataFrame:
    """Sum of population-weighted z-scores of the five census factors, per area.

    Weights default to the ``population`` column (or equal weights).  A
    constant factor contributes zero.
    """
    df = areas.copy()
    if weights is None:
        w = df["population"].to_numpy(float) if "population" in df else np.ones(len(df))
    else:
        w = weights.reindex(df["area_id"]).fillna(0).to_numpy(float)
    w = w / w.sum()
    di = np.zeros(len(df))
    for f in DEPRIVATION_FACTORS:
        x = df[f].to_numpy(float)
        mu = float(np.sum(w * x))
        sd = math.sqrt(float(np.sum(w * (x - mu) ** 2)))
        if sd <= 1e-12 * max(1.0, abs(mu)):
            warnings.warn(f"deprivation factor {f} is constant", stacklevel=2)
            continue
        di += (x - mu) / sd
    df["di"] = di
    return df


@dataclass
class DeprivationResult:
    areas: pd.DataFrame  # area_id, factors, di
    subject_quintile: np.ndarray  # 1..5, 0 for excluded subjects
    summary: pd.DataFrame  # fi mean / CI per quintile
    n_excluded: int
    degenerate: bool


def deprivation_quintiles(
    areas: pd.DataFrame, subject_areas: Sequence[str | None], fi: Sequence[float]
) -> DeprivationResult:
    """Quintiles of the deprivation index over subjects, with FI mean and 95% CI."""
    table = deprivation_index(areas)
    di_of = dict(zip(table["area_id"], table["di"]))
    x = np.asarray(fi, dtype=float)
    di = np.array([di_of.get(a, np.nan) if a is not None else np.nan for a in subject_areas], float)
    ok = ~np.isnan(di)
    n_excl = int((~ok).sum())
    if n_excl:
        logger.warning("%d subjects without deprivation data excluded", n_excl)
    quint = np.zeros(len(x), dtype=int)
    degenerate = len(np.unique(di[ok])) < 2
    if ok.any():
        if degenerate:
            warnings.warn("deprivation index constant: single degenerate quintile", stacklevel=2)
            quint[ok] = 1
        else:
            cuts = np.quantile(di[ok], [0.2, 0.4, 0.6, 0.8])
            quint[ok] = np.searchsorted(cuts, di[ok], side="left") + 1
    summary = fi_by_group(x[ok], quint[ok], mode="mean_ci")
    return DeprivationResult(table, quint, summary, n_excl, degenerate)


# --------------------------------------------------------------------------
# stability


@dataclass
class Correlation:
    rho: float
    n: int
    undefined: bool = False


def spearman(a: Sequence[float], b: Sequence[float]) -> Correlation:
    x = np.asarray(a, dtype=float)
    y = np.asarray(b, dtype=float)
    if len(x) < 3 or len(np.unique(x)) < 2 or len(np.unique(y)) < 2:
        return Correlation(math.nan, len(x), True)
    return Correlation(float(spearmanr(x, y).statistic), len(x))


@dataclass
class StabilityResult:
    overall: Correlation
    stable_profiles: Correlation
    changed_profiles: Correlation
    n_shared: int

    def frame(self) -> pd.DataFrame:
        rows = [("all shared subjects", self.overall), ("same profile", self.stable_profiles),
                ("changed profile", self.changed_profiles)]
        return pd.DataFrame([(k, c.rho, c.n, c.undefined) for k, c in rows],
                            columns=["subset", "spearman_rho", "n", "undefined"])


def stability_metrics(
    ids1: Sequence[str], fi1: Sequence[float], profiles1: np.ndarray,
    ids2: Sequence[str], fi2: Sequence[float], profiles2: np.ndarray,
) -> StabilityResult:
    """Spearman correlation of FI for subjects present in both cohorts."""
    pos2 = {s: i for i, s in enumerate(ids2)}
    shared = [(i, pos2[s]) for i, s in enumerate(ids1) if s in pos2]
    if len(shared) < 3:
        raise ValueError("need at least 3 shared subjects")
    i1 = np.array([a for a, _ in shared])
    i2 = np.array([b for _, b in shared])
    f1 = np.asarray(fi1, float)[i1]
    f2 = np.asarray(fi2, float)[i2]
    same = np.all(np.asarray(profiles1)[i1] == np.asarray(profiles2)[i2], axis=1)
    return StabilityResult(
        spearman(f1, f2), spearman(f1[same], f2[same]), spearman(f1[~same], f2[~same]), len(shared)
    )
