"""Outcome linkage: turn outcome-year records into :class:`OutcomeVector` flags."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .cohort import Cohort, DataError, FlowRecord, OutcomeVector, Subject
from .markers import CodePattern, _parse_pattern, match_code, tomllib

logger = logging.getLogger(__name__)

REQUIRED = ("er_red_code", "hospitalisation", "disability", "dementia", "femur_fracture")


@dataclass(frozen=True)
class OutcomeDefinition:
    name: str
    patterns: tuple[CodePattern, ...]

    def hit(self, records: Sequence[FlowRecord]) -> bool:
        return any(match_code(r, p) for r in records for p in self.patterns)


def parse_outcomes(doc: Mapping) -> dict[str, OutcomeDefinition]:
    out = {}
    for o in doc.get("outcome", ()):
        pats = tuple(p for raw in o.get("pattern", ()) for p in _parse_pattern(raw))
        out[o["name"]] = OutcomeDefinition(o["name"], pats)
    missing = [n for n in REQUIRED if n not in out]
    if missing:
        raise DataError(f"outcome definitions missing: {missing}")
    return out


def load_outcome_definitions(path: str | Path | None = None) -> dict[str, OutcomeDefinition]:
    if path is None:
        text = resources.files("frailty.data").joinpath("outcomes.toml").read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_outcomes(tomllib.loads(text))


def outcome_vector(
    subject: Subject, cohort_spec, definitions: Mapping[str, OutcomeDefinition]
) -> OutcomeVector:
    if subject.death_date is not None and subject.death_date <= cohort_spec.baseline_end:
        raise DataError(f"{subject.id}: death date {subject.death_date} before outcome year")
    base = subject.baseline_records
    out = subject.outcome_records
    baseline_dis = definitions["disability"].hit(base)
    baseline_dem = definitions["dementia"].hit(base)
    # events after a death in the same year still count (no competing-risk censoring)
    return OutcomeVector(
        death=subject.death_date is not None and cohort_spec.in_outcome(subject.death_date),
        er_red_code=definitions["er_red_code"].hit(out),
        hospitalisation=definitions["hospitalisation"].hit(out),
        disability_onset=not baseline_dis and definitions["disability"].hit(out),
        dementia_onset=not baseline_dem and definitions["dementia"].hit(out),
        femur_fracture=definitions["femur_fracture"].hit(out),
        baseline_disability=baseline_dis,
        baseline_dementia=baseline_dem,
    )


def link_outcomes(
    cohort: Cohort, definitions: Mapping[str, OutcomeDefinition] | None = None
) -> Cohort:
    """Return a copy of ``cohort`` whose subjects carry their outcome flags."""
    defs = definitions or load_outcome_definitions()
    subjects = [
        dataclasses.replace(s, outcomes=outcome_vector(s, cohort.spec, defs))
        for s in cohort.subjects
    ]
    linked = dataclasses.replace(cohort, subjects=subjects)
    return linked
