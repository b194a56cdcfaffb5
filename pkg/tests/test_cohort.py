from __future__ import annotations

import dataclasses
import datetime as dt
import logging
import math

import pytest

from frailty.cohort import (
    Code,
    CodeSystem,
    Cohort,
    CohortSpec,
    DataError,
    Flow,
    FlowRecord,
    OutcomeVector,
    Subject,
    age_on,
    load_cohort,
    load_flows,
    save_cohort,
    validate_cohort,
    write_flows,
)
from frailty.markers import extract_cohort_markers, load_markers
from frailty.outcomes import link_outcomes
from frailty.synthetic import SpecError, SyntheticSpec, generate_synthetic_cohort

SPEC = CohortSpec(outcome_year=2018)

REGISTRY = """subject_id,sex,birth_date,death_date,area_id
s1,F,1940-03-01,,A01
s2,M,1960-01-01,,A01
s3,M,1930-06-15,2016-05-01,A02
s4,F,1935-12-31,2018-07-01,A02
"""


def write(dir_, name, text):
    (dir_ / name).write_text(text)
    return dir_ / name


@pytest.fixture
def flow_dir(tmp_path):
    write(tmp_path, "registry.csv", REGISTRY)
    write(tmp_path, "hospital_discharge.csv",
          "subject_id,date,duration,dx1,dx2,dx3,dx4,dx5,dx6\n"
          "s1,2015-12-31,3,4280,,,,,\n"
          "s1,2016-01-01,3,4280,2941,,,,\n"
          "s1,2018-03-02,5,8208,,,,,\n"
          "s1,2019-01-01,5,8208,,,,,\n"
          "ghost,2017-01-01,1,4280,,,,,\n")
    write(tmp_path, "er_admission.csv",
          "subject_id,date,priority,dx1,dx2,dx3,dx4,dx5\n"
          "s4,2018-02-01,red,410,,,,\n")
    write(tmp_path, "exemption.csv",
          "subject_id,date,exemption_code,diagnosis\n"
          "s1,2017-06-01,038,332\n"
          "s4,2017-06-01,048,\n")
    return tmp_path


# -- windows and ingestion -------------------------------------------------


def test_window_bounds():
    assert SPEC.baseline_start == dt.date(2016, 1, 1)
    assert SPEC.baseline_end == dt.date(2017, 12, 31)
    assert SPEC.in_outcome(dt.date(2018, 12, 31)) and not SPEC.in_outcome(dt.date(2019, 1, 1))
    assert age_on(dt.date(1953, 1, 2), dt.date(2018, 1, 1)) == 64
    assert age_on(dt.date(1953, 1, 1), dt.date(2018, 1, 1)) == 65
    with pytest.raises(ValueError):
        CohortSpec(2018, min_age=-1)


def test_load_flows_partitions_records(flow_dir, caplog):
    with caplog.at_level(logging.WARNING):
        c = load_flows(flow_dir, SPEC)
    # s2 is too young, s3 died before the outcome year
    assert c.ids == ["s1", "s4"]
    s1 = c.subjects[0]
    assert s1.age_years == 77 and s1.area_id == "A01"
    assert [r.date for r in s1.baseline_records if r.flow is Flow.HOSPITAL_DISCHARGE] == [dt.date(2016, 1, 1)]
    assert [r.date for r in s1.outcome_records] == [dt.date(2018, 3, 2)]
    hd = next(r for r in s1.baseline_records if r.flow is Flow.HOSPITAL_DISCHARGE)
    assert hd.codes == (Code(CodeSystem.ICD9CM, "4280", 0), Code(CodeSystem.ICD9CM, "2941", 1))
    assert hd.attr("duration") == "3"
    ex = next(r for r in s1.baseline_records if r.flow is Flow.EXEMPTION)
    assert ex.codes == (Code(CodeSystem.EXEMPTION, "038", 0), Code(CodeSystem.ICD9CM, "332", 1))
    assert "absent from the registry" in caplog.text


def test_malformed_rows_skip_or_abort(flow_dir, caplog):
    write(flow_dir, "pharmaceutical.csv", "subject_id,date,atc\ns1,2017-13-40,N05BA01\ns1,2017-01-05,N05BA01\n")
    with caplog.at_level(logging.WARNING):
        c = load_flows(flow_dir, SPEC)
    assert "pharmaceutical.csv:2" in caplog.text
    assert sum(r.flow is Flow.PHARMACEUTICAL for r in c.subjects[0].baseline_records) == 1
    with pytest.raises(DataError, match="pharmaceutical.csv:2"):
        load_flows(flow_dir, SPEC, on_error="abort")


def test_missing_columns_and_registry(flow_dir, tmp_path_factory):
    write(flow_dir, "outpatient.csv", "subject_id,when\ns1,2017-01-01\n")
    with pytest.raises(DataError, match="missing columns"):
        load_flows(flow_dir, SPEC)
    with pytest.raises(DataError, match="registry"):
        load_flows(tmp_path_factory.mktemp("empty"), SPEC)


def test_duplicate_registry_row(flow_dir):
    write(flow_dir, "registry.csv", REGISTRY + "s1,F,1940-03-01,,A01\n")
    assert load_flows(flow_dir, SPEC).ids == ["s1", "s4"]
    with pytest.raises(DataError, match="duplicate"):
        load_flows(flow_dir, SPEC, on_error="abort")


# -- outcomes --------------------------------------------------------------


def test_link_outcomes(flow_dir):
    c = link_outcomes(load_flows(flow_dir, SPEC))
    s1, s4 = c.subjects
    # 8208 is a femur fracture; 2941 at baseline is dementia evidence
    assert s1.outcomes == OutcomeVector(hospitalisation=True, femur_fracture=True, baseline_dementia=True)
    assert s4.outcomes.death and s4.outcomes.er_red_code
    assert not s4.outcomes.hospitalisation


def rec(flow, date, *codes, **attrs):
    return FlowRecord("x", flow, date, tuple(codes), tuple(sorted(attrs.items())))


def subject(baseline=(), outcome=(), death=None):
    return Subject("x", "F", dt.date(1940, 1, 1), 78, None, death, list(baseline), list(outcome))


def test_prevalent_dementia_is_not_onset():
    dem = Code(CodeSystem.EXEMPTION, "029", 0)
    s = subject([rec(Flow.EXEMPTION, dt.date(2017, 3, 1), dem)], [rec(Flow.EXEMPTION, dt.date(2018, 3, 1), dem)])
    o = link_outcomes(Cohort(SPEC, [s])).subjects[0].outcomes
    assert not o.dementia_onset and o.dementia_prevalent and o.baseline_dementia


def test_no_outcome_records_gives_all_false():
    o = link_outcomes(Cohort(SPEC, [subject()])).subjects[0].outcomes
    assert o == OutcomeVector()
    assert not any(dataclasses.asdict(o).values())


def test_red_code_needs_red_priority():
    er = [rec(Flow.ER_ADMISSION, dt.date(2018, 5, 1), priority="yellow")]
    assert not link_outcomes(Cohort(SPEC, [subject(outcome=er)])).subjects[0].outcomes.er_red_code
    er = [rec(Flow.ER_ADMISSION, dt.date(2018, 5, 1), priority="red")]
    assert link_outcomes(Cohort(SPEC, [subject(outcome=er)])).subjects[0].outcomes.er_red_code


def test_death_before_outcome_year_is_an_error():
    with pytest.raises(DataError, match="death"):
        link_outcomes(Cohort(SPEC, [subject(death=dt.date(2017, 12, 31))]))


# -- validation ------------------------------------------------------------


def test_validate_clean_and_injected(small_cohort):
    assert validate_cohort(small_cohort) == []
    dup = Cohort(small_cohort.spec, small_cohort.subjects[:5] + [small_cohort.subjects[0]])
    assert validate_cohort(dup) == [f"{small_cohort.subjects[0].id}: duplicate subject id"]
    s = small_cohort.subjects[1]
    bad = dataclasses.replace(
        s, outcomes=dataclasses.replace(s.outcomes, disability_onset=True, baseline_disability=True)
    )
    problems = validate_cohort(Cohort(small_cohort.spec, [bad]))
    assert problems == [f"{s.id}: disability_onset with baseline_disability"]


def test_validate_flags_out_of_window_record():
    s = subject([rec(Flow.PHARMACEUTICAL, dt.date(2015, 1, 1), Code(CodeSystem.ATC, "N05", 0))])
    assert len(validate_cohort(Cohort(SPEC, [s]))) == 1


def test_onset_never_with_baseline(small_cohort):
    for s in small_cohort:
        assert not (s.outcomes.disability_onset and s.outcomes.baseline_disability)
        assert not (s.outcomes.dementia_onset and s.outcomes.baseline_dementia)


# -- serialisation ---------------------------------------------------------


def test_ndjson_round_trip(small_cohort, tmp_path):
    sub = small_cohort.subset(range(200))
    save_cohort(sub, tmp_path / "c.ndjson")
    back = load_cohort(tmp_path / "c.ndjson")
    assert back.spec == sub.spec
    assert back.subjects == sub.subjects
    save_cohort(back, tmp_path / "d.ndjson")
    assert (tmp_path / "c.ndjson").read_bytes() == (tmp_path / "d.ndjson").read_bytes()


def test_flow_round_trip(small_cohort, tmp_path):
    sub = small_cohort.subset(range(300))
    write_flows(sub, tmp_path)
    back = link_outcomes(load_flows(tmp_path, sub.spec))
    assert back.ids == sub.ids

    def key(r):
        return (r.flow.value, r.date, [(c.system.value, c.code, c.position) for c in r.codes], r.attributes)

    for a, b in zip(sub.subjects, back.subjects):
        assert (a.sex, a.birth_date, a.age_years, a.area_id, a.death_date) == (
            b.sex, b.birth_date, b.age_years, b.area_id, b.death_date)
        assert sorted(a.baseline_records, key=key) == sorted(b.baseline_records, key=key)
        assert sorted(a.outcome_records, key=key) == sorted(b.outcome_records, key=key)
        assert a.outcomes == b.outcomes


# -- synthetic generator ---------------------------------------------------


def test_synthetic_empty():
    c = generate_synthetic_cohort(SyntheticSpec(n_subjects=0, seed=1))
    assert len(c) == 0


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic_cohort(SyntheticSpec(n_subjects=300, seed=9))
    b = generate_synthetic_cohort(SyntheticSpec(n_subjects=300, seed=9))
    c = generate_synthetic_cohort(SyntheticSpec(n_subjects=300, seed=10))
    save_cohort(a, tmp_path / "a")
    save_cohort(b, tmp_path / "b")
    save_cohort(c, tmp_path / "c")
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()


def test_synthetic_prevalence_within_two_se():
    spec = SyntheticSpec(n_subjects=10_000, seed=21)
    c = generate_synthetic_cohort(spec)
    assert validate_cohort(c) == []
    table = extract_cohort_markers(c, load_markers("extended"))
    n = len(c)
    for m in spec.markers:
        if len(m.probs) != 2:
            continue
        se = math.sqrt(m.prevalence * (1 - m.prevalence) / n)
        assert abs(table.prevalence()[m.name] - m.prevalence) <= 2 * se + 1e-12, m.name
    hyp = table.prevalence()["hypertension"]
    assert 0.29 <= hyp <= 0.31


def test_synthetic_spec_errors():
    with pytest.raises(SpecError):
        generate_synthetic_cohort(SyntheticSpec(n_subjects=-1))
    from frailty.synthetic import DEFAULT_MARKERS, MarkerGen

    bad = tuple(MarkerGen.binary(m.name, 0.0, 1.0) if m.name == "cancer" else m for m in DEFAULT_MARKERS)
    with pytest.raises(SpecError, match="cancer"):
        generate_synthetic_cohort(SyntheticSpec(n_subjects=10, markers=bad))
