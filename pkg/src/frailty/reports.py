"""Report registry: tables and figure data built from pipeline artifacts.

Every report is written as CSV (one file per section) and as an aligned text
rendering under ``<output>/reports``.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
import pandas as pd

from . import analytics as an
from .cohort import Cohort, load_cohort
from .pipeline import ConfigError, DependencyError, MarkerData, PosetConfig, Run, load_marker_data, load_trace
from .selection import compute_fi, outcome_aucs

logger = logging.getLogger(__name__)

AGE_CLASSES = ((65, 69), (70, 74), (75, 79), (80, 84), (85, 89), (90, 200))


@dataclass
class Report:
    id: str
    title: str
    sections: dict[str, pd.DataFrame] = field(default_factory=dict)

    def text(self) -> str:
        out = [self.title, "=" * len(self.title)]
        for name, df in self.sections.items():
            if name != "main":
                out += ["", f"[{name}]"]
            out.append(df.to_string(float_format=lambda v: f"{v:.4f}", na_rep="-"))
        return "\n".join(out) + "\n"


class ReportContext:
    """Lazy access to the artifacts a report needs."""

    def __init__(self, run: Run):
        self.run = run
        self.cfg = run.config["analytics"]

    def _need(self, name: str, stage: str):
        p = self.run.file(name)
        if not p.exists():
            raise DependencyError(f"report needs {name}; run the '{stage}' stage first")
        return p

    @cached_property
    def cohort(self) -> Cohort:
        return load_cohort(self._need("cohort.ndjson", "synth/ingest"))

    @cached_property
    def markers(self) -> MarkerData:
        self._need("markers.csv", "markers")
        return load_marker_data(self.run)

    @cached_property
    def scores(self) -> pd.DataFrame:
        return pd.read_csv(self._need("scores.csv", "score"), dtype={"subject_id": str, "profile": str})

    @cached_property
    def final_set(self) -> list[str]:
        return json.loads(self._need("selection.json", "select").read_text())["final_set"]

    @property
    def fi(self) -> np.ndarray:
        return self.scores["fi"].to_numpy()

    @cached_property
    def strata(self) -> an.Strata:
        return an.stratify_quartiles(self.fi, self.scores["profile_id"].to_numpy())

    @cached_property
    def outcome_frame(self) -> pd.DataFrame:
        return an.outcome_frame(self.cohort)

    @cached_property
    def stratum_tables(self) -> an.StratumTable:
        return an.outcome_tables(self.outcome_frame, self.strata)

    @cached_property
    def cci(self) -> np.ndarray:
        return an.cohort_charlson(self.cohort)

    def poset_config(self) -> PosetConfig:
        p = self.run.config["poset"]
        return PosetConfig(p["method"], int(p["n_samples"]), self.run.config.seed, int(p["exact_cap"]))


# --------------------------------------------------------------------------
# individual reports


def _table1(ctx: ReportContext) -> Report:
    trace = load_trace(ctx._need("selection_trace.csv", "select"))
    core = json.loads(ctx.run.file("screening.json").read_text())["core_set"]
    entry = {}
    for s in trace.accepted_steps:
        for v in (s.candidate.split("+") if s.step == 1 else [s.candidate]):
            entry[v] = s.step
    tab = pd.DataFrame({"reference": [entry.get(v, 0) for v in sorted(core)]}, index=sorted(core))
    aucs = {"reference": trace.final_mean_auc}
    for sc in ("a", "b", "c"):
        p = ctx.run.file(f"robustness_{sc}.csv")
        if p.exists():
            r = pd.read_csv(p, index_col=0)
            r.columns = [f"{sc}:{c}" for c in r.columns]
            aucs.update(r.loc["mean_auc"].to_dict())
            tab = tab.join(r.drop(index="mean_auc"), how="left")
    tab = tab.fillna(0).astype(int)
    tab.index.name = "variable"
    means = pd.DataFrame([aucs], index=["mean_auc"])[list(tab.columns)]
    return Report("table1", "Variable entry step per selection run (0 = not selected)",
                  {"main": tab, "mean_auc": means})


def _table2(ctx: ReportContext) -> Report:
    cols = {"cohort1": an.describe_fi(ctx.fi, ctx.cfg["bin_width"]).as_series()}
    sections = {}
    p2 = ctx.run.file("scores2.csv")
    if p2.exists():
        s2 = pd.read_csv(p2, dtype={"subject_id": str, "profile": str})
        cols["cohort2"] = an.describe_fi(s2["fi"], ctx.cfg["bin_width"]).as_series()
        prof1 = np.array([list(p) for p in ctx.scores["profile"]])
        prof2 = np.array([list(p) for p in s2["profile"]])
        st = an.stability_metrics(ctx.scores["subject_id"], ctx.fi, prof1, s2["subject_id"], s2["fi"], prof2)
        sections["stability"] = st.frame()
    main = pd.DataFrame(cols)
    main.index.name = "statistic"
    return Report("table2", "FI summary statistics", {"main": main, **sections})


def _table3(ctx: ReportContext) -> Report:
    return Report("table3", "FI quartile strata", {"main": ctx.strata.frame()})


def _table4(ctx: ReportContext) -> Report:
    df = ctx.stratum_tables.prevalence
    df.index.name = "outcome"
    return Report("table4", "Outcome prevalence (%) by FI quartile", {"main": df})


def _table5(ctx: ReportContext) -> Report:
    df = ctx.stratum_tables.distribution
    df.index.name = "outcome"
    return Report("table5", "Distribution (%) of each outcome across FI quartiles", {"main": df})


def _table6(ctx: ReportContext) -> Report:
    return Report("table6", "Number of outcomes per subject: distribution (%) across FI quartiles",
                  {"main": ctx.stratum_tables.count_distribution})


def _table7(ctx: ReportContext) -> Report:
    df = an.top_percentile_table(ctx.fi, ctx.scores["subject_id"], ctx.outcome_frame, ctx.cfg["thresholds"])
    df.index.name = "outcome"
    return Report("table7", "Outcome prevalence (%) among the frailest subjects", {"main": df})


def _auc_frame(fi: np.ndarray, outcomes) -> pd.DataFrame:
    rows = []
    for r in outcome_aucs(fi, outcomes, with_ci=True):
        rows.append({"outcome": r.outcome, "auc": r.auc, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi,
                     "n": r.n, "n_events": r.n_events, "restricted": r.restricted, "degenerate": r.degenerate})
    return pd.DataFrame(rows).set_index("outcome")


def _table8(ctx: ReportContext) -> Report:
    return Report("table8", "AUC of the FI per outcome with 95% DeLong interval",
                  {"main": _auc_frame(ctx.fi, ctx.markers.outcomes)})


def _table9(ctx: ReportContext) -> Report:
    md = ctx.markers
    final = ctx.final_set
    sex = md.frame["sex"].to_numpy()
    rows, corr = [], []
    for s in sorted(np.unique(sex)):
        idx = np.flatnonzero(sex == s)
        sub = md.outcomes.subset(idx)
        own = compute_fi(md.values(final)[idx], final, ctx.poset_config()).fi
        pooled = ctx.fi[idx]
        c = an.spearman(pooled, own)
        corr.append({"sex": s, "n": len(idx), "spearman_rho": c.rho, "undefined": c.undefined})
        for label, score in (("pooled", pooled), ("within_sex", own)):
            for r in outcome_aucs(score, sub, with_ci=True):
                rows.append({"sex": s, "fi": label, "outcome": r.outcome, "auc": r.auc,
                             "ci_lo": r.ci_lo, "ci_hi": r.ci_hi, "n_events": r.n_events})
    return Report("table9", "AUC by sex: pooled FI versus FI recomputed within each sex",
                  {"main": pd.DataFrame(rows), "correlation": pd.DataFrame(corr)})


def _fig2(ctx: ReportContext) -> Report:
    return Report("fig2", "FI histogram", {"main": an.describe_fi(ctx.fi, ctx.cfg["bin_width"]).histogram})


def _age_label(age: int) -> str:
    for lo, hi in AGE_CLASSES:
        if lo <= age <= hi:
            return f"{lo}+" if hi >= 200 else f"{lo}-{hi}"
    return f"<{AGE_CLASSES[0][0]}"


def _fig3(ctx: ReportContext) -> Report:
    fr = ctx.markers.frame
    parts = []
    for s in sorted(fr["sex"].unique()):
        m = (fr["sex"] == s).to_numpy()
        g = an.fi_by_group(ctx.fi[m], [_age_label(a) for a in fr["age_years"][m]], mode="mean_ci")
        g.insert(0, "sex", s)
        parts.append(g)
    return Report("fig3", "Mean FI (95% CI) by age class and sex",
                  {"main": pd.concat(parts, ignore_index=True).rename(columns={"group": "age_class"})})


def _fig5(ctx: ReportContext) -> Report:
    md = ctx.markers
    levels = json.loads(ctx.run.file("marker_levels.json").read_text())["markers"]
    parts = []
    for m in levels:
        if m["kind"] != "dichotomous":
            continue
        present = md.frame[m["name"]].to_numpy() > 0
        if present.all() or not present.any():
            continue
        g = an.fi_by_group(ctx.fi, np.where(present, "present", "absent"), mode="quartiles")
        g.insert(0, "disease", m["name"])
        parts.append(g)
    df = pd.concat(parts, ignore_index=True).rename(columns={"group": "status", "ci_lo": "q1", "ci_hi": "q3"})
    return Report("fig5", "FI median and interquartile range by disease presence", {"main": df})


def _fig6(ctx: ReportContext) -> Report:
    classes = [an.cci_class(v) for v in ctx.cci]
    df = an.fi_by_group(ctx.fi, classes, mode="quartiles").rename(
        columns={"group": "cci_class", "ci_lo": "q1", "ci_hi": "q3"})
    return Report("fig6", "FI median and interquartile range by Charlson class", {"main": df})


def _fig7(ctx: ReportContext) -> Report:
    frail = an.top_fraction_flag(ctx.fi, ctx.scores["subject_id"], ctx.cfg["frail_fraction"])
    comorbid = ctx.cci >= 1
    attr = "baseline_disability" if ctx.cfg["disability_flag"] == "baseline" else "disability_prevalent"
    disabled = np.array([bool(getattr(s.outcomes, attr)) for s in ctx.cohort.subjects])
    venn = an.venn_overlap(frail, comorbid, disabled).to_frame()
    venn.index.name = "region"
    marg = pd.DataFrame({"percent": [frail.mean() * 100, comorbid.mean() * 100, disabled.mean() * 100]},
                        index=pd.Index(["frail", "comorbid", "disabled"], name="set"))
    return Report("fig7", f"Frailty, comorbidity and disability overlap (disability: {ctx.cfg['disability_flag']})",
                  {"main": venn, "marginals": marg})


def _fig8(ctx: ReportContext) -> Report:
    areas = pd.read_csv(ctx._need("areas.csv", "synth/ingest"), dtype={"area_id": str})
    res = an.deprivation_quintiles(areas, [s.area_id for s in ctx.cohort.subjects], ctx.fi)
    df = res.summary.rename(columns={"group": "quintile"})
    info = pd.DataFrame({"n_excluded": [res.n_excluded], "degenerate": [res.degenerate]})
    return Report("fig8", "Mean FI (95% CI) by deprivation quintile", {"main": df, "info": info})


REPORTS: dict[str, Callable[[ReportContext], Report]] = {
    "table1": _table1, "table2": _table2, "table3": _table3, "table4": _table4,
    "table5": _table5, "table6": _table6, "table7": _table7, "table8": _table8,
    "table9": _table9, "fig2": _fig2, "fig3": _fig3, "fig5": _fig5,
    "fig6": _fig6, "fig7": _fig7, "fig8": _fig8,
}


def build_report(run: Run, report_id: str, ctx: ReportContext | None = None) -> Report:
    if report_id not in REPORTS:
        raise ConfigError(f"unknown report {report_id!r}; known: {', '.join(REPORTS)}")
    return REPORTS[report_id](ctx or ReportContext(run))


def emit_report(run: Run, which: list[str]) -> list[str]:
    """Write the requested reports; returns the written file names (relative to the run dir)."""
    ids = list(REPORTS) if "all" in which else which
    unknown = [w for w in ids if w not in REPORTS]
    if unknown:
        raise ConfigError(f"unknown report id(s) {unknown}; known: {', '.join(REPORTS)}")
    run.check_dependencies("report")
    t0 = time.perf_counter()
    ctx = ReportContext(run)
    out = run.dir / "reports"
    out.mkdir(exist_ok=True)
    written = []
    for rid in ids:
        rep = build_report(run, rid, ctx)
        for name, df in rep.sections.items():
            fname = f"{rid}.csv" if name == "main" else f"{rid}_{name}.csv"
            keep_index = not isinstance(df.index, pd.RangeIndex)
            df.to_csv(out / fname, index=keep_index, lineterminator="\n")
            written.append(f"reports/{fname}")
        (out / f"{rid}.txt").write_text(rep.text())
        written.append(f"reports/{rid}.txt")
        logger.info("report %s written", rid)
    run.record("report", written, {"reports": len(ids)}, time.perf_counter() - t0)
    return written
