"""Cohorts, subjects and administrative flow records.

Flow files are plain CSV, one file per flow kind, with the headers listed in
:data:`FLOW_COLUMNS`.  Diagnosis columns (``dx1`` .. ``dxN``) are positional:
``dx1`` is the primary diagnosis (position 0).
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import enum
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

logger = logging.getLogger(__name__)


class Flow(str, enum.Enum):
    HEALTH_REGISTRY = "HealthRegistry"
    HOSPITAL_DISCHARGE = "HospitalDischarge"
    ER_ADMISSION = "ERAdmission"
    PSYCHIATRY = "Psychiatry"
    HOME_CARE = "HomeCare"
    EXEMPTION = "Exemption"
    PHARMACEUTICAL = "Pharmaceutical"
    OUTPATIENT = "Outpatient"


class CodeSystem(str, enum.Enum):
    ICD9CM = "ICD9CM"
    ICD10 = "ICD10"
    ATC = "ATC"
    EXEMPTION = "ExemptionCode"
    SERVICE = "ServiceCode"


MAX_DIAGNOSES = {
    Flow.HOSPITAL_DISCHARGE: 6,
    Flow.ER_ADMISSION: 5,
    Flow.PSYCHIATRY: 3,
}

REGISTRY_COLUMNS = ("subject_id", "sex", "birth_date", "death_date", "area_id")

# file stem, columns; dx columns are expanded per flow
FLOW_COLUMNS: dict[Flow, tuple[str, ...]] = {
    Flow.HOSPITAL_DISCHARGE: ("subject_id", "date", "duration",
                              "dx1", "dx2", "dx3", "dx4", "dx5", "dx6"),
    Flow.ER_ADMISSION: ("subject_id", "date", "priority", "dx1", "dx2", "dx3", "dx4", "dx5"),
    Flow.PSYCHIATRY: ("subject_id", "date", "dx1", "dx2", "dx3"),
    Flow.HOME_CARE: ("subject_id", "date", "service_code", "n_services"),
    Flow.EXEMPTION: ("subject_id", "date", "exemption_code", "diagnosis"),
    Flow.PHARMACEUTICAL: ("subject_id", "date", "atc"),
    Flow.OUTPATIENT: ("subject_id", "date", "service_code"),
}

FLOW_FILES: dict[Flow, str] = {
    Flow.HEALTH_REGISTRY: "registry.csv",
    Flow.HOSPITAL_DISCHARGE: "hospital_discharge.csv",
    Flow.ER_ADMISSION: "er_admission.csv",
    Flow.PSYCHIATRY: "psychiatry.csv",
    Flow.HOME_CARE: "home_care.csv",
    Flow.EXEMPTION: "exemption.csv",
    Flow.PHARMACEUTICAL: "pharmaceutical.csv",
    Flow.OUTPATIENT: "outpatient.csv",
}

_DX_SYSTEM = {
    Flow.HOSPITAL_DISCHARGE: CodeSystem.ICD9CM,
    Flow.ER_ADMISSION: CodeSystem.ICD9CM,
    Flow.PSYCHIATRY: CodeSystem.ICD10,
}


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True, slots=True)
class Code:
    system: CodeSystem
    code: str
    position: int = 0


@dataclass(frozen=True, slots=True)
class FlowRecord:
    subject: str
    flow: Flow
    date: dt.date
    codes: tuple[Code, ...] = ()
    attributes: tuple[tuple[str, str], ...] = ()

    def attr(self, key: str, default: str | None = None) -> str | None:
        for k, v in self.attributes:
            if k == key:
                return v
        return default

    def to_json(self) -> dict:
        return {
            "flow": self.flow.value,
            "date": self.date.isoformat(),
            "codes": [[c.system.value, c.code, c.position] for c in self.codes],
            "attributes": dict(self.attributes),
        }

    @classmethod
    def from_json(cls, subject: str, obj: Mapping) -> "FlowRecord":
        return cls(
            subject=subject,
            flow=Flow(obj["flow"]),
            date=dt.date.fromisoformat(obj["date"]),
            codes=tuple(Code(CodeSystem(s), c, int(p)) for s, c, p in obj["codes"]),
            attributes=tuple(sorted(obj.get("attributes", {}).items())),
        )


OUTCOME_NAMES = (
    "death", "er_red_code", "hospitalisation",
    "disability_onset", "dementia_onset", "femur_fracture",
)
# same six, with prevalent disability/dementia (used by stratification tables)
PREVALENT_OUTCOME_NAMES = (
    "death", "er_red_code", "hospitalisation",
    "disability_prevalent", "dementia_prevalent", "femur_fracture",
)


@dataclass(frozen=True, slots=True)
class OutcomeVector:
    death: bool = False
    er_red_code: bool = False
    hospitalisation: bool = False
    disability_onset: bool = False
    dementia_onset: bool = False
    femur_fracture: bool = False
    baseline_disability: bool = False
    baseline_dementia: bool = False

    @property
    def disability_prevalent(self) -> bool:
        return self.baseline_disability or self.disability_onset

    @property
    def dementia_prevalent(self) -> bool:
        return self.baseline_dementia or self.dementia_onset

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CohortSpec:
    """Two baseline calendar years followed by one outcome year."""

    outcome_year: int
    min_age: int = 65

    def __post_init__(self):
        if self.min_age < 0:
            raise ValueError("min_age must be >= 0")

    @property
    def baseline_start(self) -> dt.date:
        return dt.date(self.outcome_year - 2, 1, 1)

    @property
    def baseline_end(self) -> dt.date:
        return dt.date(self.outcome_year - 1, 12, 31)

    @property
    def outcome_start(self) -> dt.date:
        return dt.date(self.outcome_year, 1, 1)

    @property
    def outcome_end(self) -> dt.date:
        return dt.date(self.outcome_year, 12, 31)

    def in_baseline(self, d: dt.date) -> bool:
        return self.baseline_start <= d <= self.baseline_end

    def in_outcome(self, d: dt.date) -> bool:
        return self.outcome_start <= d <= self.outcome_end


def age_on(birth: dt.date, on: dt.date) -> int:
    return on.year - birth.year - ((on.month, on.day) < (birth.month, birth.day))


@dataclass(slots=True)
class Subject:
    id: str
    sex: str
    birth_date: dt.date
    age_years: int
    area_id: str | None = None
    death_date: dt.date | None = None
    baseline_records: list[FlowRecord] = field(default_factory=list)
    outcome_records: list[FlowRecord] = field(default_factory=list)
    outcomes: OutcomeVector = field(default_factory=OutcomeVector)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "sex": self.sex,
            "birth_date": self.birth_date.isoformat(),
            "age_years": self.age_years,
            "area_id": self.area_id,
            "death_date": self.death_date.isoformat() if self.death_date else None,
            "baseline_records": [r.to_json() for r in self.baseline_records],
            "outcome_records": [r.to_json() for r in self.outcome_records],
            "outcomes": self.outcomes.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Subject":
        sid = obj["id"]
        return cls(
            id=sid,
            sex=obj["sex"],
            birth_date=dt.date.fromisoformat(obj["birth_date"]),
            age_years=int(obj["age_years"]),
            area_id=obj.get("area_id"),
            death_date=dt.date.fromisoformat(obj["death_date"]) if obj.get("death_date") else None,
            baseline_records=[FlowRecord.from_json(sid, r) for r in obj["baseline_records"]],
            outcome_records=[FlowRecord.from_json(sid, r) for r in obj["outcome_records"]],
            outcomes=OutcomeVector(**obj["outcomes"]),
        )


@dataclass
class Cohort:
    spec: CohortSpec
    subjects: list[Subject]
    # synthetic cohorts also carry the generating latent score and area table
    latent: Any = None
    areas: Any = None

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self) -> Iterator[Subject]:
        return iter(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    def subset(self, index: Iterable[int]) -> "Cohort":
        index = list(index)
        latent = None if self.latent is None else [self.latent[i] for i in index]
        return Cohort(self.spec, [self.subjects[i] for i in index], latent, self.areas)


# --------------------------------------------------------------------------
# snapshot (NDJSON)


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write a cohort snapshot: a header line, then one subject per line."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {"cohort_spec": dataclasses.asdict(cohort.spec), "n_subjects": len(cohort)}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in cohort.subjects:
            fh.write(json.dumps(s.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def load_cohort(path: str | Path) -> Cohort:
    with Path(path).open("r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        spec = CohortSpec(**header["cohort_spec"])
        subjects = [Subject.from_json(json.loads(line)) for line in fh if line.strip()]
    return Cohort(spec, subjects)


# --------------------------------------------------------------------------
# flow CSV ingestion


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _record_from_row(flow: Flow, row: Mapping[str, str]) -> FlowRecord:
    sid = row["subject_id"].strip()
    if not sid:
        raise DataError("empty subject_id")
    date = _parse_date(row["date"])
    codes: list[Code] = []
    attrs: dict[str, str] = {}
    if flow in _DX_SYSTEM:
        system = _DX_SYSTEM[flow]
        for i in range(MAX_DIAGNOSES[flow]):
            value = (row.get(f"dx{i + 1}") or "").strip()
            if value:
                codes.append(Code(system, value, i))
    if flow is Flow.EXEMPTION:
        codes.append(Code(CodeSystem.EXEMPTION, row["exemption_code"].strip(), 0))
        diag = (row.get("diagnosis") or "").strip()
        if diag:
            codes.append(Code(CodeSystem.ICD9CM, diag, 1))
    elif flow is Flow.PHARMACEUTICAL:
        codes.append(Code(CodeSystem.ATC, row["atc"].strip(), 0))
    elif flow in (Flow.HOME_CARE, Flow.OUTPATIENT):
        svc = (row.get("service_code") or "").strip()
        if svc:
            codes.append(Code(CodeSystem.SERVICE, svc, 0))
    for col in FLOW_COLUMNS[flow]:
        if col in ("subject_id", "date", "exemption_code", "diagnosis", "atc", "service_code"):
            continue
        if col.startswith("dx") and col[2:].isdigit():
            continue
        value = (row.get(col) or "").strip()
        if value:
            attrs[col] = value
    return FlowRecord(sid, flow, date, tuple(codes), tuple(sorted(attrs.items())))


def _read_rows(path: Path, expected: tuple[str, ...], on_error: str):
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        missing = [c for c in expected if c not in header]
        if missing:
            raise DataError(f"{path.name}: missing columns {missing}")
        for row in reader:
            yield reader.line_num, row


def load_flows(
    paths: Mapping[Flow | str, str | Path] | str | Path,
    spec: CohortSpec,
    on_error: str = "skip",
) -> Cohort:
    """Read the registry and clinical flow CSVs into a cohort.

    ``paths`` maps flows to files, or is a directory holding the standard file
    names of :data:`FLOW_FILES` (missing clinical files are treated as empty).
    Malformed rows are logged with their line number and skipped, or raise
    :class:`DataError` when ``on_error="abort"``.  Outcome flags are not set
    here; see :func:`link_outcomes`.
    """
    if on_error not in ("skip", "abort"):
        raise ValueError("on_error must be 'skip' or 'abort'")
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        files = {f: root / name for f, name in FLOW_FILES.items() if (root / name).exists()}
    else:
        files = {Flow(k): Path(v) for k, v in paths.items()}
    if Flow.HEALTH_REGISTRY not in files:
        raise DataError("registry file is required")

    def bad(path: Path, line: int, exc: Exception):
        msg = f"{path.name}:{line}: {exc}"
        if on_error == "abort":
            raise DataError(msg) from exc
        logger.warning("skipping malformed row %s", msg)

    subjects: dict[str, Subject] = {}
    reg = files[Flow.HEALTH_REGISTRY]
    too_young = dead = 0
    for line, row in _read_rows(reg, REGISTRY_COLUMNS, on_error):
        try:
            sid = row["subject_id"].strip()
            sex = row["sex"].strip().upper()
            if not sid or sex not in ("M", "F"):
                raise DataError("bad subject_id or sex")
            birth = _parse_date(row["birth_date"])
            death = _parse_date(row["death_date"]) if (row.get("death_date") or "").strip() else None
            area = (row.get("area_id") or "").strip() or None
        except (ValueError, KeyError) as exc:
            bad(reg, line, exc)
            continue
        if sid in subjects:
            bad(reg, line, DataError(f"duplicate subject {sid}"))
            continue
        age = age_on(birth, spec.outcome_start)
        if age < spec.min_age:
            too_young += 1
            continue
        if death is not None and death < spec.outcome_start:
            dead += 1
            continue
        subjects[sid] = Subject(sid, sex, birth, age, area, death)

    orphans: Counter[str] = Counter()
    for flow, path in files.items():
        if flow is Flow.HEALTH_REGISTRY:
            continue
        for line, row in _read_rows(path, FLOW_COLUMNS[flow], on_error):
            try:
                rec = _record_from_row(flow, row)
            except (ValueError, KeyError) as exc:
                bad(path, line, exc)
                continue
            subj = subjects.get(rec.subject)
            if subj is None:
                orphans[flow.value] += 1
                continue
            if spec.in_baseline(rec.date):
                subj.baseline_records.append(rec)
            elif spec.in_outcome(rec.date):
                subj.outcome_records.append(rec)
    if orphans:
        logger.warning("records for subjects absent from the registry: %s", dict(orphans))
    logger.info(
        "loaded %d subjects (%d under %d, %d dead before %d)",
        len(subjects), too_young, spec.min_age, dead, spec.outcome_year,
    )
    return Cohort(spec, list(subjects.values()))


def _record_row(rec: FlowRecord) -> dict[str, str]:
    row = {"subject_id": rec.subject, "date": rec.date.isoformat()}
    row.update(dict(rec.attributes))
    if rec.flow in _DX_SYSTEM:
        for c in rec.codes:
            row[f"dx{c.position + 1}"] = c.code
    elif rec.flow is Flow.EXEMPTION:
        for c in rec.codes:
            if c.system is CodeSystem.EXEMPTION:
                row["exemption_code"] = c.code
            else:
                row["diagnosis"] = c.code
    elif rec.flow is Flow.PHARMACEUTICAL:
        row["atc"] = rec.codes[0].code
    elif rec.codes:
        row["service_code"] = rec.codes[0].code
    return row


def write_flows(cohort: Cohort, directory: str | Path) -> dict[Flow, Path]:
    """Inverse of :func:`load_flows`: one CSV per flow under ``directory``."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    out: dict[Flow, Path] = {}
    reg_path = root / FLOW_FILES[Flow.HEALTH_REGISTRY]
    with reg_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, REGISTRY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for s in cohort.subjects:
            w.writerow({
                "subject_id": s.id, "sex": s.sex, "birth_date": s.birth_date.isoformat(),
                "death_date": s.death_date.isoformat() if s.death_date else "",
                "area_id": s.area_id or "",
            })
    out[Flow.HEALTH_REGISTRY] = reg_path
    for flow, cols in FLOW_COLUMNS.items():
        path = root / FLOW_FILES[flow]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, cols, lineterminator="\n", extrasaction="ignore")
            w.writeheader()
            for s in cohort.subjects:
                for rec in (*s.baseline_records, *s.outcome_records):
                    if rec.flow is flow:
                        w.writerow(_record_row(rec))
        out[flow] = path
    return out


# --------------------------------------------------------------------------
# validation


def validate_cohort(cohort: Cohort) -> list[str]:
    """Return one message per violated invariant (empty when the cohort is clean)."""
    problems: list[str] = []
    spec = cohort.spec
    seen: set[str] = set()
    for s in cohort.subjects:
        if not s.id:
            problems.append("empty subject id")
        if s.id in seen:
            problems.append(f"{s.id}: duplicate subject id")
        seen.add(s.id)
        if s.sex not in ("M", "F"):
            problems.append(f"{s.id}: sex must be M or F")
        if s.age_years < spec.min_age:
            problems.append(f"{s.id}: age {s.age_years} below min_age {spec.min_age}")
        o = s.outcomes
        if o.disability_onset and o.baseline_disability:
            problems.append(f"{s.id}: disability_onset with baseline_disability")
        if o.dementia_onset and o.baseline_dementia:
            problems.append(f"{s.id}: dementia_onset with baseline_dementia")
        for rec in s.baseline_records:
            if not spec.in_baseline(rec.date):
                problems.append(f"{s.id}: baseline record dated {rec.date} outside window")
        for rec in s.outcome_records:
            if not spec.in_outcome(rec.date):
                problems.append(f"{s.id}: outcome record dated {rec.date} outside outcome year")
        for rec in (*s.baseline_records, *s.outcome_records):
            cap = MAX_DIAGNOSES.get(rec.flow)
            if cap is not None:
                n_dx = sum(1 for c in rec.codes if c.system is _DX_SYSTEM[rec.flow])
                if n_dx > cap:
                    problems.append(f"{s.id}: {rec.flow.value} record with {n_dx} diagnoses > {cap}")
            if any(c.position < 0 for c in rec.codes):
                problems.append(f"{s.id}: negative code position")
    return problems
