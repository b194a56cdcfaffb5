"""Seeded synthetic cohorts driven by a latent frailty score.

Marker levels come from a Gaussian copula: every marker's latent normal
variable loads on a shared frailty factor (itself shifted by the area's
deprivation), so marginal prevalences are exact in expectation while markers
stay positively correlated.  The latent frailty score is the weighted sum of
marker levels, and each outcome is drawn from a logistic model on that score.
Records are then written so that the marker engine recovers exactly the
generated levels.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .cohort import (
    OUTCOME_NAMES,
    Code,
    CodeSystem,
    Cohort,
    CohortSpec,
    Flow,
    FlowRecord,
    OutcomeVector,
    Subject,
)
from .markers import (
    CodePattern,
    MarkerDefinition,
    MarkerKind,
    example_record,
    load_markers,
    match_code,
)
from .outcomes import OutcomeDefinition, load_outcome_definitions


class SpecError(ValueError):
    """Infeasible synthetic specification."""


@dataclass(frozen=True)
class MarkerGen:
    """Generating parameters of one marker.

    ``probs`` are the level probabilities (two entries for a dichotomous
    marker).  ``weight`` is the marker's contribution per level to the latent
    frailty score, ``loading`` the correlation of its copula variable with the
    shared frailty factor.
    """

    name: str
    probs: tuple[float, ...]
    weight: float = 0.0
    loading: float = 0.4

    @classmethod
    def binary(cls, name: str, prevalence: float, weight: float = 0.0, loading: float = 0.4):
        return cls(name, (1.0 - prevalence, prevalence), weight, loading)

    @property
    def prevalence(self) -> float:
        return 1.0 - self.probs[0]


@dataclass(frozen=True)
class OutcomeGen:
    intercept: float
    slope: float


DEFAULT_MARKERS: tuple[MarkerGen, ...] = (
    MarkerGen("age", (0.28, 0.25, 0.19, 0.15, 0.09, 0.04), weight=0.35, loading=0.3),
    MarkerGen("hospitalisations", (0.78, 0.18, 0.04), weight=0.6),
    MarkerGen.binary("mental_disorders", 0.15, 0.5),
    MarkerGen.binary("nervous_system", 0.18, 0.7),
    MarkerGen.binary("cancer", 0.10, 0.4),
    MarkerGen.binary("disability", 0.12, 1.0),
    MarkerGen.binary("heart_failure", 0.06, 0.8),
    MarkerGen.binary("kidney_failure", 0.05, 0.6),
    MarkerGen.binary("diabetes", 0.20, 0.0, 0.0),
    MarkerGen.binary("hypertension", 0.30, 0.0, 0.0),
    MarkerGen.binary("thyroid_disorders", 0.08, 0.0, 0.0),
    MarkerGen.binary("glaucoma", 0.05, 0.0, 0.0),
    MarkerGen.binary("gout", 0.04, 0.0, 0.0),
    MarkerGen.binary("osteoarthritis", 0.12, 0.0, 0.0),
    MarkerGen.binary("allergy", 0.07, 0.0, 0.0),
)

# markers whose weight makes them clearly detectable at 50k subjects
STRONG_SIGNAL = ("age", "hospitalisations", "nervous_system", "disability", "heart_failure")

DEFAULT_OUTCOMES: Mapping[str, OutcomeGen] = {
    "death": OutcomeGen(-4.6, 1.0),
    "er_red_code": OutcomeGen(-4.6, 0.8),
    "hospitalisation": OutcomeGen(-2.6, 0.7),
    "disability_onset": OutcomeGen(-4.2, 0.8),
    "dementia_onset": OutcomeGen(-5.2, 0.8),
    "femur_fracture": OutcomeGen(-5.6, 0.6),
}


@dataclass(frozen=True)
class SyntheticSpec:
    n_subjects: int
    seed: int = 0
    markers: tuple[MarkerGen, ...] = DEFAULT_MARKERS
    outcomes: Mapping[str, OutcomeGen] = field(default_factory=lambda: dict(DEFAULT_OUTCOMES))
    area_count: int = 50
    outcome_year: int = 2018
    min_age: int = 65
    female_share: float = 0.57
    deprivation_effect: float = 0.5
    # share of nervous-system-positive subjects whose evidence is a dementia code
    dementia_share: float = 0.3
    marker_set: str = "extended"

    def validate(self, definitions: Mapping[str, MarkerDefinition]) -> None:
        if self.n_subjects < 0:
            raise SpecError("n_subjects must be >= 0")
        if self.area_count < 1:
            raise SpecError("area_count must be >= 1")
        if not 0.0 <= self.female_share <= 1.0:
            raise SpecError("female_share must lie in [0, 1]")
        if not 0.0 <= self.dementia_share <= 1.0:
            raise SpecError("dementia_share must lie in [0, 1]")
        missing = [k for k in OUTCOME_NAMES if k not in self.outcomes]
        if missing:
            raise SpecError(f"outcome parameters missing for {missing}")
        names = [m.name for m in self.markers]
        if len(set(names)) != len(names):
            raise SpecError("duplicate generated marker")
        for m in self.markers:
            d = definitions.get(m.name)
            if d is None:
                raise SpecError(f"{m.name}: no marker definition")
            if len(m.probs) != d.n_levels:
                raise SpecError(f"{m.name}: {len(m.probs)} level probabilities for {d.n_levels} levels")
            p = np.asarray(m.probs)
            if (p < 0).any() or (p > 1).any() or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
                raise SpecError(f"{m.name}: level probabilities must lie in [0,1] and sum to 1")
            if m.weight != 0.0 and p.max() >= 1.0:
                raise SpecError(f"{m.name}: non-zero weight on a marker with no variation")
            if not 0.0 <= m.loading < 1.0:
                raise SpecError(f"{m.name}: loading must lie in [0, 1)")
            if d.kind is MarkerKind.ORDINAL_AGE and d.cuts and d.cuts[0] <= self.min_age:
                raise SpecError(f"{m.name}: age cuts must exceed min_age")


def latent_score(values: np.ndarray, names: Sequence[str], markers: Sequence[MarkerGen]) -> np.ndarray:
    """Weighted sum of marker levels; the generator's ground-truth frailty."""
    values = np.asarray(values, dtype=float)
    score = np.zeros(values.shape[0])
    for m in markers:
        if m.weight and m.name in names:
            score += m.weight * values[:, list(names).index(m.name)]
    return score


# --------------------------------------------------------------------------
# record witnesses


_NEUTRAL_DX = ("7865", "7890", "7231", "7804", "7862", "V7010", "4660")
_NEUTRAL_ATC = ("A11CC05", "N02BE01", "A12AA04", "S01XA20", "D02AC")
_PATTERN_PREFERENCE = {
    Flow.EXEMPTION: 0,
    Flow.PHARMACEUTICAL: 1,
    Flow.PSYCHIATRY: 2,
    Flow.HOME_CARE: 3,
    Flow.OUTPATIENT: 4,
    Flow.ER_ADMISSION: 5,
    Flow.HOSPITAL_DISCHARGE: 6,
}


class _Witnesses:
    """Pick, for every marker and outcome, a record pattern that triggers it alone."""

    def __init__(self, defs: Sequence[MarkerDefinition], outcomes: Mapping[str, OutcomeDefinition],
                 catalogue: Sequence[MarkerDefinition] = ()):
        self.defs = list(defs)
        # background records must not trigger any marker of the whole catalogue
        self.catalogue = list(catalogue) or self.defs
        self.outcomes = outcomes
        self.count_flows = {f for d in defs if d.kind is MarkerKind.ORDINAL_COUNT for f in d.count_source}
        self.marker: dict[str, CodePattern] = {}
        self.marker_hits: dict[str, set[str]] = {}
        for d in defs:
            if d.kind is MarkerKind.DICHOTOMOUS:
                self.marker[d.name], self.marker_hits[d.name] = self._pick_marker(d)
        self.outcome: dict[str, CodePattern] = {}
        for name in ("er_red_code", "hospitalisation", "disability", "dementia", "femur_fracture"):
            self.outcome[name] = self._pick_outcome(name)
        self.dementia_hits = self._hits(self.outcome["dementia"])
        self.neutral_dx = [c for c in _NEUTRAL_DX if self._neutral(Flow.HOSPITAL_DISCHARGE, CodeSystem.ICD9CM, c)]
        self.neutral_atc = [c for c in _NEUTRAL_ATC if self._neutral(Flow.PHARMACEUTICAL, CodeSystem.ATC, c)]
        if not self.neutral_dx or not self.neutral_atc:
            raise SpecError("no neutral codes left for background records")

    def _hits(self, pattern: CodePattern) -> set[str]:
        rec = example_record(pattern, "x", dt.date(2000, 1, 1))
        return {d.name for d in self.catalogue if d.kind is MarkerKind.DICHOTOMOUS
                and any(match_code(rec, p) for p in d.patterns)}

    def _outcome_hits(self, pattern: CodePattern) -> set[str]:
        rec = example_record(pattern, "x", dt.date(2000, 1, 1))
        return {k for k, o in self.outcomes.items() if o.hit([rec])}

    def _pick_marker(self, d: MarkerDefinition):
        ranked = sorted(d.patterns, key=lambda p: _PATTERN_PREFERENCE.get(p.flow, 9))
        allowed_outcomes = {"disability"} if d.name == "disability" else set()
        for p in ranked:
            if p.flow in self.count_flows:
                continue
            hits = self._hits(p)
            if hits == {d.name} and self._outcome_hits(p) <= allowed_outcomes:
                return p, hits
        raise SpecError(f"{d.name}: no pattern triggers this marker alone")

    def _pick_outcome(self, name: str) -> CodePattern:
        ranked = sorted(self.outcomes[name].patterns, key=lambda p: _PATTERN_PREFERENCE.get(p.flow, 9))
        for p in ranked:
            if self._outcome_hits(p) == {name}:
                return p
        raise SpecError(f"outcome {name}: no pattern triggers it alone")

    def _neutral(self, flow: Flow, system: CodeSystem, code: str) -> bool:
        rec = FlowRecord("x", flow, dt.date(2000, 1, 1), (Code(system, code, 0),), (("priority", "green"),))
        if any(match_code(rec, p) for d in self.catalogue if d.kind is MarkerKind.DICHOTOMOUS
               for p in d.patterns):
            return False
        if flow is Flow.HOSPITAL_DISCHARGE:
            rec = dataclasses.replace(rec, flow=Flow.ER_ADMISSION)
        return not any(o.hit([rec]) for o in self.outcomes.values())


def _charlson_pool(outcomes: Mapping[str, OutcomeDefinition]) -> list[str]:
    """Deyo codes safe to use as secondary discharge diagnoses."""
    from .analytics import load_deyo_mapping

    pool = []
    for cond in load_deyo_mapping():
        code = cond.example_code()
        rec = FlowRecord("x", Flow.HOSPITAL_DISCHARGE, dt.date(2000, 1, 1),
                         (Code(CodeSystem.ICD9CM, "V7010", 0), Code(CodeSystem.ICD9CM, code, 1)))
        if not any(o.hit([rec]) for k, o in outcomes.items() if k != "hospitalisation"):
            pool.append(code)
    return pool


# --------------------------------------------------------------------------
# generation


def _random_dates(rng: np.random.Generator, start: dt.date, end: dt.date, size: int) -> list[dt.date]:
    span = (end - start).days
    offs = rng.integers(0, span + 1, size=size)
    return [start + dt.timedelta(days=int(o)) for o in offs]


def _levels_from_normal(z: np.ndarray, probs: Sequence[float]) -> np.ndarray:
    """Levels cut at the sample quantiles of ``z``.

    The shared factor is clustered by area, so fixed normal cut points would
    let every correlated marker drift together; ranking pins each marginal to
    its configured share (to within one subject) and keeps the dependence.
    """
    n = len(z)
    bounds = np.rint(np.cumsum(probs)[:-1] * n)
    rank = np.empty(n, dtype=np.int64)
    rank[np.argsort(z, kind="stable")] = np.arange(n)
    return np.searchsorted(bounds, rank, side="right").astype(np.int16)


def _area_table(rng: np.random.Generator, n_areas: int) -> pd.DataFrame:
    dep = rng.standard_normal(n_areas)
    base = {
        "low_education": (0.35, 0.08),
        "unemployment": (0.08, 0.03),
        "rented_dwellings": (0.25, 0.07),
        "single_parent": (0.10, 0.03),
        "housing_density": (2.0, 0.4),
    }
    cols = {"area_id": [f"A{i + 1:04d}" for i in range(n_areas)], "deprivation": dep}
    for name, (mu, sd) in base.items():
        cols[name] = np.clip(mu + sd * (0.8 * dep + 0.6 * rng.standard_normal(n_areas)), 0.001, None)
    cols["population"] = rng.integers(500, 5000, size=n_areas)
    return pd.DataFrame(cols)


@dataclass
class _Draw:
    """Latent state of one wave, kept to evolve the next one."""

    z: np.ndarray  # (n, n_markers) copula normals
    factor: np.ndarray
    area: np.ndarray
    sex: np.ndarray
    age: np.ndarray
    ids: list[str]


def _ages_for_levels(rng, levels: np.ndarray, d: MarkerDefinition, min_age: int) -> np.ndarray:
    lo = np.array([min_age, *d.cuts])
    hi = np.array([*d.cuts, d.cuts[-1] + 10 if d.cuts else min_age + 30])
    return rng.integers(lo[levels], hi[levels])


def generate_synthetic_cohort(spec: SyntheticSpec) -> Cohort:
    """A single synthetic cohort, a pure function of ``spec``."""
    return generate_synthetic_cohorts(spec, n_waves=1)[0]


def generate_synthetic_cohorts(
    spec: SyntheticSpec, n_waves: int = 1, persistence: float = 0.9
) -> list[Cohort]:
    """Consecutive yearly cohorts of the same population.

    Wave ``k`` has outcome year ``spec.outcome_year + k``.  Survivors age by one
    year and keep their identity; their copula variables follow an AR(1) step
    with autocorrelation ``persistence`` (marginals unchanged).  Subjects who
    died are replaced by newcomers at ``min_age``.
    """
    all_defs = {d.name: d for d in load_markers(spec.marker_set)}
    spec.validate(all_defs)
    defs = [all_defs[m.name] for m in spec.markers]
    outcome_defs = load_outcome_definitions()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    areas = _area_table(rng, spec.area_count)
    wit = _Witnesses(defs, outcome_defs, list(all_defs.values()))
    charlson_pool = _charlson_pool(outcome_defs)

    n = spec.n_subjects
    K = len(defs)
    loadings = np.array([m.loading for m in spec.markers])
    eff = spec.deprivation_effect
    area = rng.integers(0, spec.area_count, size=n)
    e = rng.standard_normal(n)
    dep = areas["deprivation"].to_numpy()
    factor = (eff * dep[area] + e) / math.sqrt(1.0 + eff * eff) if n else e
    eps = rng.standard_normal((n, K))
    z = np.sqrt(loadings) * factor[:, None] + np.sqrt(1.0 - loadings) * eps
    sex = np.where(rng.random(n) < spec.female_share, "F", "M")
    ids = [f"S{spec.seed % 10**6:06d}-{i:07d}" for i in range(n)]
    age = None
    next_id = n
    cohorts = []
    for wave in range(n_waves):
        year = spec.outcome_year + wave
        levels = np.zeros((n, K), dtype=np.int16)
        for j, (m, d) in enumerate(zip(spec.markers, defs)):
            if d.kind is MarkerKind.ORDINAL_AGE and age is not None:
                levels[:, j] = [d.level_of(a) for a in age]
            else:
                levels[:, j] = _levels_from_normal(z[:, j], m.probs)
        for j, d in enumerate(defs):
            if d.kind is MarkerKind.ORDINAL_AGE:
                if age is None:
                    age = _ages_for_levels(rng, levels[:, j], d, spec.min_age)
        if age is None:
            age = rng.integers(spec.min_age, spec.min_age + 30, size=n)
        cohort = _build_cohort(spec, year, rng, defs, wit, outcome_defs, charlson_pool,
                               levels, ids, sex, age, area, areas)
        cohorts.append(cohort)
        if wave + 1 == n_waves:
            break
        # evolve to the next wave
        alive = np.array([s.death_date is None for s in cohort.subjects], bool)
        n_new = int((~alive).sum())
        z = persistence * z + math.sqrt(1.0 - persistence**2) * rng.standard_normal((n, K))
        e_new = rng.standard_normal(n_new)
        area_new = rng.integers(0, spec.area_count, size=n_new)
        f_new = (eff * dep[area_new] + e_new) / math.sqrt(1.0 + eff * eff)
        z_new = np.sqrt(loadings) * f_new[:, None] + np.sqrt(1.0 - loadings) * rng.standard_normal((n_new, K))
        z = np.concatenate([z[alive], z_new])
        area = np.concatenate([area[alive], area_new])
        sex = np.concatenate([sex[alive], np.where(rng.random(n_new) < spec.female_share, "F", "M")])
        age = np.concatenate([age[alive] + 1, np.full(n_new, spec.min_age)])
        ids = [i for i, a in zip(ids, alive) if a] + [
            f"S{spec.seed % 10**6:06d}-{next_id + k:07d}" for k in range(n_new)
        ]
        next_id += n_new
    return cohorts


def _build_cohort(spec, year, rng, defs, wit, outcome_defs, charlson_pool,
                  levels, ids, sex, age, area, areas) -> Cohort:
    n, K = levels.shape
    cs = CohortSpec(outcome_year=year, min_age=spec.min_age)
    names = [d.name for d in defs]
    latent = latent_score(levels, names, spec.markers)

    # baseline dementia: only where every marker its evidence triggers is present
    dem_hits = [names.index(h) for h in wit.dementia_hits if h in names]
    eligible = np.ones(n, bool)
    for j in dem_hits:
        eligible &= levels[:, j] > 0
    if len(wit.dementia_hits - set(names)):
        eligible[:] = False
    base_dementia = eligible & (rng.random(n) < spec.dementia_share) if dem_hits else np.zeros(n, bool)
    base_disability = levels[:, names.index("disability")] > 0 if "disability" in names else np.zeros(n, bool)

    u = rng.random((n, len(OUTCOME_NAMES)))
    flags = {}
    for k, name in enumerate(OUTCOME_NAMES):
        og = spec.outcomes[name]
        flags[name] = u[:, k] < expit(og.intercept + og.slope * latent)
    flags["disability_onset"] &= ~base_disability
    flags["dementia_onset"] &= ~base_dementia

    b0, b1 = cs.baseline_start, cs.baseline_end
    o0, o1 = cs.outcome_start, cs.outcome_end
    n_days_base = (b1 - b0).days
    n_days_out = (o1 - o0).days
    day_base = rng.integers(0, n_days_base + 1, size=(n, K + 4))
    day_out = rng.integers(0, n_days_out + 1, size=(n, 8))
    death_day = rng.integers(0, n_days_out + 1, size=n)
    extra = rng.random((n, 6))
    n_charlson = rng.poisson(0.4 + 0.5 * np.clip(latent, 0, None))
    birth_off = rng.integers(0, 364, size=n)
    dx_pick = rng.integers(0, 1 << 30, size=(n, 8))

    subjects = []
    for i in range(n):
        sid = ids[i]
        base: list[FlowRecord] = []
        for j, d in enumerate(defs):
            lv = int(levels[i, j])
            if lv == 0 or d.kind is MarkerKind.ORDINAL_AGE:
                continue
            date = b0 + dt.timedelta(days=int(day_base[i, j]))
            if d.kind is MarkerKind.DICHOTOMOUS:
                if base_dementia[i] and d.name in wit.dementia_hits:
                    continue  # evidence comes from the dementia record below
                base.append(example_record(wit.marker[d.name], sid, date))
            else:
                lo = d.cuts[lv - 1]
                if lv < len(d.cuts):
                    count = lo + int(extra[i, 0] * (d.cuts[lv] - lo))
                else:
                    count = lo + int(rng.geometric(0.5)) - 1
                for c in range(count):
                    cdate = b0 + dt.timedelta(days=int((day_base[i, j] + 97 * c) % (n_days_base + 1)))
                    base.append(_background(d.count_source[0], sid, cdate, wit, dx_pick[i, c % 8]))
        if base_dementia[i]:
            base.append(example_record(wit.outcome["dementia"], sid,
                                       b0 + dt.timedelta(days=int(day_base[i, K]))))
        # background noise that triggers nothing
        if extra[i, 1] < 0.3:
            base.append(_background(Flow.PHARMACEUTICAL, sid, b0 + dt.timedelta(days=int(day_base[i, K + 1])),
                                    wit, dx_pick[i, 1]))
        if extra[i, 2] < 0.15:
            base.append(_background(Flow.ER_ADMISSION, sid, b0 + dt.timedelta(days=int(day_base[i, K + 2])),
                                    wit, dx_pick[i, 2]))
        if extra[i, 3] < 0.1:
            base.append(_background(Flow.OUTPATIENT, sid, b0 + dt.timedelta(days=int(day_base[i, K + 3])),
                                    wit, dx_pick[i, 3]))

        death = o0 + dt.timedelta(days=int(death_day[i])) if flags["death"][i] else None
        last = death or o1

        def odate(k: int) -> dt.date:
            span = (last - o0).days
            return o0 + dt.timedelta(days=int(day_out[i, k] % (span + 1)))

        out: list[FlowRecord] = []
        if flags["er_red_code"][i]:
            out.append(example_record(wit.outcome["er_red_code"], sid, odate(0)))
        if flags["hospitalisation"][i]:
            out.append(_hospitalisation(sid, odate(1), wit, charlson_pool, int(n_charlson[i]), dx_pick[i]))
        if flags["disability_onset"][i]:
            out.append(example_record(wit.outcome["disability"], sid, odate(2)))
        if flags["dementia_onset"][i]:
            out.append(example_record(wit.outcome["dementia"], sid, odate(3)))
        if flags["femur_fracture"][i]:
            out.append(example_record(wit.outcome["femur_fracture"], sid, odate(4)))
        if extra[i, 4] < 0.1:
            out.append(_background(Flow.ER_ADMISSION, sid, odate(5), wit, dx_pick[i, 5]))

        a = int(age[i])
        birth = dt.date(year - a - 1, 1, 2) + dt.timedelta(days=int(birth_off[i]))
        subjects.append(Subject(
            id=sid,
            sex=str(sex[i]),
            birth_date=birth,
            age_years=a,
            area_id=str(areas["area_id"].iloc[int(area[i])]),
            death_date=death,
            baseline_records=sorted(base, key=lambda r: (r.date, r.flow.value)),
            outcome_records=sorted(out, key=lambda r: (r.date, r.flow.value)),
            outcomes=OutcomeVector(
                death=bool(flags["death"][i]),
                er_red_code=bool(flags["er_red_code"][i]),
                hospitalisation=bool(flags["hospitalisation"][i]),
                disability_onset=bool(flags["disability_onset"][i]),
                dementia_onset=bool(flags["dementia_onset"][i]),
                femur_fracture=bool(flags["femur_fracture"][i]),
                baseline_disability=bool(base_disability[i]),
                baseline_dementia=bool(base_dementia[i]),
            ),
        ))
    return Cohort(cs, subjects, latent=latent.tolist(), areas=areas)


def _background(flow: Flow, sid: str, date: dt.date, wit: _Witnesses, pick: int) -> FlowRecord:
    if flow is Flow.PHARMACEUTICAL:
        code = wit.neutral_atc[pick % len(wit.neutral_atc)]
        return FlowRecord(sid, flow, date, (Code(CodeSystem.ATC, code, 0),))
    if flow is Flow.OUTPATIENT:
        return FlowRecord(sid, flow, date, (Code(CodeSystem.SERVICE, "89.7", 0),))
    dx = wit.neutral_dx[pick % len(wit.neutral_dx)]
    if flow is Flow.ER_ADMISSION:
        prio = ("green", "white", "yellow")[pick % 3]
        return FlowRecord(sid, flow, date, (Code(CodeSystem.ICD9CM, dx, 0),), (("priority", prio),))
    if flow is Flow.HOSPITAL_DISCHARGE:
        return FlowRecord(sid, flow, date, (Code(CodeSystem.ICD9CM, dx, 0),),
                          (("duration", str(2 + pick % 12)),))
    raise SpecError(f"no background record for flow {flow.value}")


def _hospitalisation(sid, date, wit, pool, n_secondary, picks) -> FlowRecord:
    dx = wit.neutral_dx[int(picks[0]) % len(wit.neutral_dx)]
    codes = [Code(CodeSystem.ICD9CM, dx, 0)]
    chosen: list[str] = []
    for k in range(min(n_secondary, 5)):
        code = pool[int(picks[(k + 1) % 8] // (k + 1)) % len(pool)]
        if code not in chosen:
            chosen.append(code)
    codes += [Code(CodeSystem.ICD9CM, c, p + 1) for p, c in enumerate(chosen)]
    return FlowRecord(sid, Flow.HOSPITAL_DISCHARGE, date, tuple(codes),
                      (("duration", str(2 + int(picks[1]) % 12)),))
