"""Staged pipeline: config loading, stage artifacts and the run manifest.

Each stage reads its predecessor's artifacts from the output directory and
writes its own, recording in ``manifest.json`` a hash of the configuration it
depends on (its own section plus everything upstream), the seed, row counts,
artifact checksums and wall-clock timings.  Re-running a stage whose hash and
artifacts are unchanged is a no-op unless forced.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import pandas as pd

from .cohort import Cohort, CohortSpec, DataError, load_cohort, load_flows, save_cohort
from .markers import (
    BUILTIN_MARKER_SETS,
    MarkerKind,
    discretize_counts,
    extract_cohort_markers,
    load_markers,
    thresholds_to_cuts,
    tomllib,
)
from .outcomes import link_outcomes, load_outcome_definitions
from .poset import Method
from .screening import (
    OutcomeData,
    odds_ratio_matrix,
    prevalence_screen,
    protective_screen,
    stepwise_vote_select,
)
from .selection import (
    PosetConfig,
    SelectionConfig,
    SelectionTrace,
    TraceStep,
    compute_fi,
    forward_select,
    outcome_aucs,
    robustness_run,
)
from .synthetic import DEFAULT_MARKERS, SyntheticSpec, generate_synthetic_cohorts

logger = logging.getLogger(__name__)

OUTPUT_ENV = "FRAILTY_OUTPUT_DIR"


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 1


class DependencyError(PipelineError):
    exit_code = 3


class StaleArtifactError(DependencyError):
    pass


# --------------------------------------------------------------------------
# configuration


DEFAULTS: dict[str, Any] = {
    "threads": 1,
    "cohort": {"outcome_year": 2018, "min_age": 65},
    "markers": {"definitions": "extended", "outcomes": None, "discretize": False,
                "discretize_B": 10, "discretize_fraction": 0.5},
    "screening": {"prevalence_threshold": 0.01, "protective_rule": "point", "protective_min_outcomes": 2,
                  "n_models": 100, "vote_share": 0.5, "min_outcomes": 3},
    "selection": {"method": "lpom", "n_samples": 2000, "epsilon": 1e-4, "max_variables": None},
    "poset": {"method": "montecarlo", "n_samples": 10000, "exact_cap": 10},
    "robustness": {"scenarios": ["a", "b", "c"], "n_folds": 4, "n_repeats": 2, "keep_fraction": 0.9},
    "analytics": {"bin_width": 0.02, "thresholds": [0.25, 0.10, 0.05, 0.02, 0.01],
                  "frail_fraction": 0.10, "disability_flag": "baseline"},
}


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class PipelineConfig:
    raw: dict
    base_dir: Path

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = tomllib.loads(path.read_text("utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    @classmethod
    def from_dict(cls, doc: Mapping, base_dir: str | Path = ".") -> "PipelineConfig":
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir))
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def synthetic(self) -> bool:
        return "synthetic" in self.raw

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q

    def validate(self) -> None:
        if "seed" not in self.raw:
            raise ConfigError("config must set 'seed'")
        if self.synthetic == ("flows" in self.raw):
            raise ConfigError("config needs exactly one of [synthetic] or [flows]")
        if "flows" in self.raw:
            fl = self.raw["flows"]
            for key in ("directory", "second_directory", "areas"):
                if fl.get(key) is not None and not self.path(fl[key]).exists():
                    raise ConfigError(f"flows.{key}: path does not exist: {fl[key]}")
        defs = self.raw["markers"]["definitions"]
        if defs not in BUILTIN_MARKER_SETS and not self.path(defs).exists():
            raise ConfigError(f"markers.definitions: {defs} is neither a builtin set nor a file")
        for sec in ("poset", "selection"):
            try:
                Method(self.raw[sec]["method"])
            except ValueError as exc:
                raise ConfigError(f"{sec}.method: {exc}") from exc
        if self.raw["screening"]["protective_rule"] not in ("point", "ci"):
            raise ConfigError("screening.protective_rule must be 'point' or 'ci'")
        if self.raw["analytics"]["disability_flag"] not in ("baseline", "prevalent"):
            raise ConfigError("analytics.disability_flag must be 'baseline' or 'prevalent'")
        bad = set(self.raw["robustness"]["scenarios"]) - {"a", "b", "c"}
        if bad:
            raise ConfigError(f"unknown robustness scenarios {sorted(bad)}")

    def output_dir(self, override: str | Path | None = None) -> Path:
        if override:
            return Path(override)
        if self.raw.get("output_dir"):
            return self.path(self.raw["output_dir"])
        env = os.environ.get(OUTPUT_ENV)
        if env:
            return Path(env)
        return Path("frailty_output")


# --------------------------------------------------------------------------
# stages


STAGES = ("cohort", "markers", "screen", "select", "score", "robustness", "report")
DEPENDS = {
    "cohort": (),
    "markers": ("cohort",),
    "screen": ("markers",),
    "select": ("screen",),
    "score": ("select",),
    "robustness": ("select",),
    "report": ("score",),
}
SECTIONS = {
    "cohort": ("seed", "cohort", "synthetic", "flows"),
    "markers": ("markers",),
    "screen": ("seed", "screening"),
    "select": ("seed", "selection"),
    "score": ("seed", "poset"),
    "robustness": ("seed", "robustness", "selection"),
    "report": ("analytics",),
}


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def stage_hash(config: PipelineConfig, stage: str) -> str:
    parts = {k: config.raw.get(k) for k in SECTIONS[stage]}
    upstream = [stage_hash(config, d) for d in DEPENDS[stage]]
    return hashlib.sha256(_canonical([stage, parts, upstream]).encode()).hexdigest()


class Run:
    """Output directory plus manifest bookkeeping."""

    def __init__(self, config: PipelineConfig, out_dir: Path, threads: int | None = None):
        self.config = config
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.threads = int(threads if threads is not None else config["threads"])
        self.manifest_path = self.dir / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {
            "stages": {}}

    def file(self, name: str) -> Path:
        return self.dir / name

    def save_manifest(self) -> None:
        self.manifest["config"] = self.config.raw
        self.manifest["seed"] = self.config.seed
        self.manifest_path.write_text(json.dumps(self.manifest, sort_keys=True, indent=2, default=str) + "\n")

    def check_dependencies(self, stage: str) -> None:
        for dep in DEPENDS[stage]:
            entry = self.manifest["stages"].get(dep)
            if entry is None or not all(self.file(a).exists() for a in entry["artifacts"]):
                raise DependencyError(f"stage '{stage}' needs the artifacts of stage '{dep}'; run it first")
            if entry["config_hash"] != stage_hash(self.config, dep):
                raise StaleArtifactError(
                    f"stale artifacts: stage '{dep}' was run with a different configuration; "
                    f"re-run '{dep}' first"
                )

    def up_to_date(self, stage: str) -> bool:
        entry = self.manifest["stages"].get(stage)
        if entry is None or entry["config_hash"] != stage_hash(self.config, stage):
            return False
        for name, digest in entry["artifacts"].items():
            p = self.file(name)
            if not p.exists() or _sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, artifacts: Iterable[str], rows: Mapping[str, int], seconds: float) -> None:
        self.manifest["stages"][stage] = {
            "config_hash": stage_hash(self.config, stage),
            "seed": self.config.seed,
            "artifacts": {a: _sha256_file(self.file(a)) for a in sorted(set(artifacts))},
            "rows": dict(rows),
            "seconds": round(seconds, 3),
        }
        self.save_manifest()


def _write_csv(df: pd.DataFrame, path: Path, index: bool = False) -> None:
    df.to_csv(path, index=index, lineterminator="\n")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, default=str) + "\n")


# --- cohort ----------------------------------------------------------------


def synthetic_spec(config: PipelineConfig) -> SyntheticSpec:
    syn = dict(config["synthetic"])
    kw = {k: syn[k] for k in ("area_count", "female_share", "deprivation_effect", "dementia_share",
                               "marker_set") if k in syn}
    return SyntheticSpec(
        n_subjects=int(syn["n_subjects"]),
        seed=config.seed,
        outcome_year=int(config["cohort"]["outcome_year"]),
        min_age=int(config["cohort"]["min_age"]),
        markers=DEFAULT_MARKERS,
        **kw,
    )


def stage_cohort(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    arts: list[str] = []
    rows = {}
    if cfg.synthetic:
        syn = cfg["synthetic"]
        waves = int(syn.get("waves", 1))
        cohorts = generate_synthetic_cohorts(synthetic_spec(cfg), n_waves=waves,
                                             persistence=float(syn.get("persistence", 0.9)))
        for k, c in enumerate(cohorts):
            suffix = "" if k == 0 else str(k + 1)
            save_cohort(c, run.file(f"cohort{suffix}.ndjson"))
            _write_csv(pd.DataFrame({"subject_id": c.ids, "latent": c.latent}), run.file(f"latent{suffix}.csv"))
            arts += [f"cohort{suffix}.ndjson", f"latent{suffix}.csv"]
            rows[f"subjects{suffix}"] = len(c)
        _write_csv(cohorts[0].areas, run.file("areas.csv"))
        arts.append("areas.csv")
    else:
        fl = cfg["flows"]
        spec = CohortSpec(int(cfg["cohort"]["outcome_year"]), int(cfg["cohort"]["min_age"]))
        outcomes = load_outcome_definitions(cfg.path(cfg["markers"].get("outcomes")))
        c = link_outcomes(load_flows(cfg.path(fl["directory"]), spec, fl.get("on_error", "skip")), outcomes)
        save_cohort(c, run.file("cohort.ndjson"))
        arts.append("cohort.ndjson")
        rows["subjects"] = len(c)
        if fl.get("second_directory"):
            spec2 = CohortSpec(spec.outcome_year + 1, spec.min_age)
            c2 = link_outcomes(load_flows(cfg.path(fl["second_directory"]), spec2, fl.get("on_error", "skip")),
                               outcomes)
            save_cohort(c2, run.file("cohort2.ndjson"))
            arts.append("cohort2.ndjson")
            rows["subjects2"] = len(c2)
        if fl.get("areas"):
            shutil.copyfile(cfg.path(fl["areas"]), run.file("areas.csv"))
            arts.append("areas.csv")
    return arts, rows


# --- markers ---------------------------------------------------------------


def _marker_frame(cohort: Cohort, table) -> pd.DataFrame:
    df = pd.DataFrame(table.values, columns=table.names)
    df.insert(0, "subject_id", cohort.ids)
    df.insert(1, "sex", [s.sex for s in cohort.subjects])
    df.insert(2, "age_years", [s.age_years for s in cohort.subjects])
    df.insert(3, "area_id", [s.area_id or "" for s in cohort.subjects])
    for name, counts in table.raw_counts.items():
        df[f"raw_{name}"] = counts
    return df


def stage_markers(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    mcfg = cfg["markers"]
    src = mcfg["definitions"]
    defs = load_markers(src if src in BUILTIN_MARKER_SETS else cfg.path(src))
    cohort = load_cohort(run.file("cohort.ndjson"))
    table = extract_cohort_markers(cohort, defs)
    cut_log = {}
    if mcfg["discretize"]:
        outcomes = [s.outcomes for s in cohort.subjects]
        for j, d in enumerate(defs):
            if d.kind is not MarkerKind.ORDINAL_COUNT:
                continue
            thr = discretize_counts(table.raw_counts[d.name], outcomes, B=int(mcfg["discretize_B"]),
                                    seed=cfg.seed, fraction=float(mcfg["discretize_fraction"]))
            new = d.with_cuts(thresholds_to_cuts(thr))
            defs[j] = new
            table.values[:, j] = [new.level_of(x) for x in table.raw_counts[d.name]]
            table.n_levels[j] = new.n_levels
            cut_log[d.name] = {"thresholds": thr, "cuts": list(new.cuts), "levels": list(new.levels)}
    _write_csv(_marker_frame(cohort, table), run.file("markers.csv"))
    arts = ["markers.csv", "marker_levels.json"]
    _write_json({
        "markers": [{"name": d.name, "kind": d.kind.value, "levels": list(d.levels), "cuts": list(d.cuts)}
                    for d in defs],
        "discretization": cut_log,
    }, run.file("marker_levels.json"))
    rows = {"subjects": len(cohort), "markers": len(defs)}
    if run.file("cohort2.ndjson").exists():
        c2 = load_cohort(run.file("cohort2.ndjson"))
        t2 = extract_cohort_markers(c2, defs)
        _write_csv(_marker_frame(c2, t2), run.file("markers2.csv"))
        arts.append("markers2.csv")
        rows["subjects2"] = len(c2)
    return arts, rows


# --- shared loaders --------------------------------------------------------


@dataclass
class MarkerData:
    frame: pd.DataFrame
    names: list[str]
    outcomes: OutcomeData

    def values(self, names=None) -> np.ndarray:
        return self.frame[list(names if names is not None else self.names)].to_numpy()


def load_marker_data(run: Run, second: bool = False) -> MarkerData:
    suffix = "2" if second else ""
    levels = json.loads(run.file("marker_levels.json").read_text())
    names = [m["name"] for m in levels["markers"]]
    frame = pd.read_csv(run.file(f"markers{suffix}.csv"), dtype={"subject_id": str, "area_id": str},
                        keep_default_na=False)
    cohort = load_cohort(run.file(f"cohort{suffix}.ndjson"))
    return MarkerData(frame, names, OutcomeData.from_cohort(cohort))


# --- screen ----------------------------------------------------------------


def stage_screen(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    sc = cfg["screening"]
    md = load_marker_data(run)
    X = md.values()
    prev = prevalence_screen(X, md.names, float(sc["prevalence_threshold"]))
    kept1 = prev.kept
    orm = odds_ratio_matrix(md.values(kept1), kept1, md.outcomes)
    prot = protective_screen(orm, sc["protective_rule"], int(sc["protective_min_outcomes"]))
    kept2 = prot.kept
    votes = stepwise_vote_select(md.values(kept2), kept2, md.outcomes, n_models=int(sc["n_models"]),
                                 seed=cfg.seed, vote_share=float(sc["vote_share"]),
                                 min_outcomes=int(sc["min_outcomes"]), threads=run.threads)
    rows = []
    for name in md.names:
        row = {"variable": name, "prevalence": prev.statistic[name], "prevalence_kept": name in kept1}
        if name in orm:
            for oname, o in zip(md.outcomes.names, orm[name]):
                row[f"or_{oname}"] = getattr(o, "estimate", float("nan"))
            row["n_protective"] = int(prot.statistic[name])
            row["protective_kept"] = name in kept2
        row["in_core_set"] = name in votes.core_set
        rows.append(row)
    _write_csv(pd.DataFrame(rows), run.file("screening.csv"))
    votes.to_csv(run.file("votes.csv"))
    _write_json({"after_prevalence": kept1, "after_protective": kept2, "core_set": votes.core_set,
                 "n_models": votes.n_models, "separated_exclusions": votes.separated_exclusions},
                run.file("screening.json"))
    return ["screening.csv", "votes.csv", "screening.json"], {"candidates": len(md.names),
                                                             "core_set": len(votes.core_set)}


# --- select ----------------------------------------------------------------


def _selection_config(cfg: PipelineConfig, threads: int) -> SelectionConfig:
    s = cfg["selection"]
    return SelectionConfig(
        epsilon=float(s["epsilon"]),
        poset=PosetConfig(s["method"], int(s["n_samples"]), cfg.seed, int(cfg["poset"]["exact_cap"])),
        threads=threads,
        max_variables=s.get("max_variables"),
    )


def stage_select(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    md = load_marker_data(run)
    core = json.loads(run.file("screening.json").read_text())["core_set"]
    if len(core) < 2:
        raise DataError(f"core set has {len(core)} variable(s); forward selection needs at least 2")
    trace = forward_select(md.values(core), core, md.outcomes, core, _selection_config(cfg, run.threads))
    _write_csv(trace.to_frame(), run.file("selection_trace.csv"))
    _write_json({"final_set": trace.final_set, "stop_reason": trace.stop_reason,
                 "mean_auc": trace.final_mean_auc}, run.file("selection.json"))
    return ["selection_trace.csv", "selection.json"], {"evaluations": len(trace.steps),
                                                       "final_set": len(trace.final_set)}


def load_trace(path: Path) -> SelectionTrace:
    df = pd.read_csv(path, keep_default_na=False)
    tr = SelectionTrace()
    auc_cols = [c for c in df.columns if c.startswith("auc_")]
    for r in df.itertuples(index=False):
        row = r._asdict()
        vim = tuple(v for v in str(row["variables_in_model"]).split("+") if v)
        tr.steps.append(TraceStep(int(row["step"]), vim, row["candidate"],
                                  {c[4:]: float(row[c]) for c in auc_cols if row[c] != ""},
                                  float(row["mean_auc"]), bool(row["accepted"]), int(row["n_eval"])))
    return tr


# --- score -----------------------------------------------------------------


def _poset_config(cfg: PipelineConfig) -> PosetConfig:
    p = cfg["poset"]
    return PosetConfig(p["method"], int(p["n_samples"]), cfg.seed, int(p["exact_cap"]))


def _score_frame(md: MarkerData, final: list[str], score) -> pd.DataFrame:
    prof = score.poset.subject_profile
    se = score.ar.mc_standard_error
    labels = ["".join(map(str, row)) for row in score.poset.profiles]
    return pd.DataFrame({
        "subject_id": md.frame["subject_id"],
        "profile": [labels[k] for k in prof],
        "profile_id": prof,
        "ar": score.ar.average_rank[prof],
        "fi": score.fi,
        "method": score.ar.method.value,
        "se": se[prof] if se is not None else np.nan,
    })


def stage_score(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    md = load_marker_data(run)
    final = json.loads(run.file("selection.json").read_text())["final_set"]
    pc = _poset_config(cfg)
    score = compute_fi(md.values(final), final, pc)
    _write_csv(_score_frame(md, final, score), run.file("scores.csv"))
    edges = score.poset.cover_edges()
    labels = ["".join(map(str, row)) for row in score.poset.profiles]
    _write_csv(pd.DataFrame({"lower": [labels[a] for a, _ in edges], "upper": [labels[b] for _, b in edges]}),
               run.file("poset_edges.csv"))
    reps = outcome_aucs(score, md.outcomes)
    summary = {
        "variables": sorted(final),
        "n_subjects": int(score.poset.n_subjects),
        "n_profiles": int(score.poset.n_profiles),
        "method": score.ar.method.value,
        "mc_samples": score.ar.mc_samples,
        "aucs": {r.outcome: r.auc for r in reps},
        "mean_auc": float(np.mean([r.auc for r in reps])),
    }
    arts = ["scores.csv", "poset_edges.csv", "score_summary.json"]
    if run.file("latent.csv").exists():
        lat = pd.read_csv(run.file("latent.csv"), dtype={"subject_id": str})["latent"].to_numpy()
        oreps = outcome_aucs(lat, md.outcomes)
        summary["oracle_aucs"] = {r.outcome: r.auc for r in oreps}
        summary["oracle_mean_auc"] = float(np.mean([r.auc for r in oreps]))
    if run.file("markers2.csv").exists():
        md2 = load_marker_data(run, second=True)
        s2 = compute_fi(md2.values(final), final, pc)
        _write_csv(_score_frame(md2, final, s2), run.file("scores2.csv"))
        arts.append("scores2.csv")
        summary["n_profiles2"] = int(s2.poset.n_profiles)
    _write_json(summary, run.file("score_summary.json"))
    return arts, {"subjects": summary["n_subjects"], "profiles": summary["n_profiles"]}


# --- robustness ------------------------------------------------------------


def stage_robustness(run: Run) -> tuple[list[str], dict]:
    cfg = run.config
    rc = cfg["robustness"]
    md = load_marker_data(run)
    core = json.loads(run.file("screening.json").read_text())["core_set"]
    sel = _selection_config(cfg, run.threads)
    arts = []
    rows = {}
    for sc in rc["scenarios"]:
        second = None
        if sc == "a":
            if not run.file("markers2.csv").exists():
                logger.warning("robustness scenario a skipped: no second cohort")
                continue
            md2 = load_marker_data(run, second=True)
            second = (md2.values(core), core, md2.outcomes)
        res = robustness_run(md.values(core), core, md.outcomes, core, sc, sel, seed=cfg.seed,
                             second=second, n_folds=int(rc["n_folds"]), n_repeats=int(rc["n_repeats"]),
                             keep_fraction=float(rc["keep_fraction"]))
        tab = res.inclusion.copy()
        tab.loc["mean_auc"] = res.mean_aucs
        _write_csv(tab, run.file(f"robustness_{sc}.csv"), index=True)
        arts.append(f"robustness_{sc}.csv")
        if res.subsample_log:
            _write_csv(pd.DataFrame(res.subsample_log), run.file(f"robustness_{sc}_log.csv"))
            arts.append(f"robustness_{sc}_log.csv")
        rows[f"runs_{sc}"] = len(res.runs)
    if not arts:
        raise DataError("no robustness scenario could be run")
    return arts, rows


# --- driver ----------------------------------------------------------------


STAGE_FUNCS = {
    "cohort": stage_cohort,
    "markers": stage_markers,
    "screen": stage_screen,
    "select": stage_select,
    "score": stage_score,
    "robustness": stage_robustness,
}


def run_stage(run: Run, stage: str, force: bool = False) -> bool:
    """Run one stage; returns False when it was skipped as up to date."""
    run.check_dependencies(stage)
    if not force and run.up_to_date(stage):
        logger.info("stage %s is up to date, skipped", stage)
        return False
    t0 = time.perf_counter()
    arts, rows = STAGE_FUNCS[stage](run)
    run.record(stage, arts, rows, time.perf_counter() - t0)
    logger.info("stage %s done in %.1fs", stage, time.perf_counter() - t0)
    return True


def run_pipeline(
    config: PipelineConfig,
    stages: Iterable[str] = ("cohort", "markers", "screen", "select", "score"),
    out_dir: str | Path | None = None,
    threads: int | None = None,
    force: bool = False,
    reports: Iterable[str] | None = None,
) -> Run:
    run = Run(config, config.output_dir(out_dir), threads)
    for st in stages:
        if st == "report":
            from .reports import emit_report

            emit_report(run, list(reports or ["all"]))
        else:
            run_stage(run, st, force)
    return run
