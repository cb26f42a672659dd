"""Cohort ingestion, index dating, timeslots, and selection."""

from datetime import date, timedelta

import pytest

from adsubtype.cohort import (
    AgeGroup,
    CodeSystem,
    CohortConfig,
    DiagnosisEvent,
    Sex,
    TablePaths,
    assign_timeslot,
    bin_age,
    compute_age_group,
    find_first_ad_date,
    load_cohort,
    normalize_code,
    parse_tables,
    save_cohort,
)


def test_normalize_code():
    assert normalize_code("g30.9") == "G309"
    assert normalize_code(" 331.0 ") == "3310"
    assert normalize_code("E78.5") == "E785"
    assert normalize_code(normalize_code("G30.9")) == "G309"


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def test_parse_tables_happy_path(table_writer):
    paths = table_writer(
        patients=[
            ["P1", "F", "05", "1950-03-02"],
            ["P2", "M", "03", "1944-11-30"],
        ],
        diagnoses=[
            ["P1", "331.0", "ICD9", "2015-06-01"],
            ["P1", "401.9", "ICD9", "2014-01-15"],
            ["P2", "G30.9", "ICD10CM", "2016-02-20"],
        ],
        prescriptions=[["P1", "860975", "2015-07-01"]],
        deaths=[["P2", "2018-05-05"]],
    )
    tables = parse_tables(paths)
    assert tables.rejects == []
    assert [p.patient_id for p in tables.patients] == ["P1", "P2"]
    assert tables.patients[0].sex is Sex.FEMALE
    assert tables.patients[0].birth_date == date(1950, 3, 2)
    assert len(tables.diagnoses) == 3
    assert tables.diagnoses[2].system is CodeSystem.ICD10CM
    assert tables.prescriptions[0].rxcui == "860975"
    assert tables.deaths == {"P2": date(2018, 5, 5)}


def test_parse_tables_rejects_malformed_rows(table_writer):
    paths = table_writer(
        patients=[
            ["P1", "F", "05", "1950-03-02"],
            ["P2", "X", "05", "1950-03-02"],  # bad sex
            ["P3", "F", "05", "2021-02-30"],  # impossible date
            ["P1", "M", "03", "1950-01-01"],  # duplicate id
            ["", "F", "05", "1950-01-01"],  # empty id
        ],
        diagnoses=[
            ["P1", "401.9", "ICD9", "2014-01-15"],
            ["P1", "401.9", "ICD42", "2014-01-15"],  # bad system
            ["P1", "", "ICD9", "2014-01-15"],  # empty code
            ["P1", "401.9", "ICD9"],  # short row
        ],
    )
    tables = parse_tables(paths)
    assert [p.patient_id for p in tables.patients] == ["P1"]
    assert len(tables.diagnoses) == 1
    by_file = {}
    for r in tables.rejects:
        by_file.setdefault(r.file, []).append(r)
    assert len(by_file["demographics"]) == 4
    assert len(by_file["diagnoses"]) == 3
    # line numbers point at the physical rows (header is line 1)
    assert [r.line for r in by_file["demographics"]] == [3, 4, 5, 6]
    assert any("duplicate" in r.reason for r in by_file["demographics"])


def test_parse_tables_bad_header_fatal(table_writer, tmp_path):
    paths = table_writer(patients=[["P1", "F", "05", "1950-03-02"]])
    (tmp_path / "patients.csv").write_text("id,sex,race,dob\nP1,F,05,1950-03-02\n")
    with pytest.raises(ValueError, match="bad header"):
        parse_tables(paths)


def test_parse_tables_missing_file_fatal(table_writer, tmp_path):
    paths = table_writer()
    missing = TablePaths(
        demographics=tmp_path / "nope.csv",
        diagnoses=paths.diagnoses,
        prescriptions=paths.prescriptions,
        deaths=paths.deaths,
    )
    with pytest.raises(FileNotFoundError):
        parse_tables(missing)


def test_parse_tables_empty_file_fatal(table_writer, tmp_path):
    paths = table_writer()
    (tmp_path / "patients.csv").write_text("")
    with pytest.raises(ValueError, match="empty file"):
        parse_tables(paths)


def test_parse_tables_skips_leading_comments(table_writer, tmp_path):
    paths = table_writer(patients=[["P1", "F", "05", "1950-03-02"]])
    original = (tmp_path / "patients.csv").read_text()
    (tmp_path / "patients.csv").write_text("# tool=x seed=1\n" + original + "P2,F,05,bad-date\n")
    tables = parse_tables(paths)
    assert [p.patient_id for p in tables.patients] == ["P1"]
    # comment line shifts data rows down by one
    assert tables.rejects[0].line == 4


# ---------------------------------------------------------------------------
# timeslots and age
# ---------------------------------------------------------------------------


def test_assign_timeslot_boundaries():
    idx = date(2018, 6, 1)
    cases = {0: 1, 1: 1, 182: 1, 183: 2, 365: 2, 366: 3, 914: 5, 915: 6, 1096: 6, 1097: 6}
    for d, slot in cases.items():
        assert assign_timeslot(idx - timedelta(days=d), idx) == slot
    assert assign_timeslot(idx - timedelta(days=1098), idx) is None
    assert assign_timeslot(idx + timedelta(days=1), idx) is None


def test_assign_timeslot_full_range():
    idx = date(2019, 1, 1)
    for d in range(0, 183 * 6):
        assert assign_timeslot(idx - timedelta(days=d), idx) == d // 183 + 1


def test_assign_timeslot_custom_geometry():
    idx = date(2018, 6, 1)
    assert assign_timeslot(idx - timedelta(days=9), idx, slot_days=10, slot_count=2) == 1
    assert assign_timeslot(idx - timedelta(days=10), idx, slot_days=10, slot_count=2) == 2
    assert assign_timeslot(idx - timedelta(days=20), idx, slot_days=10, slot_count=2) is None


def test_bin_age_half_open_bins():
    assert bin_age(64) is AgeGroup.UNDER_65
    assert bin_age(65) is AgeGroup.FROM_65_TO_75
    assert bin_age(74) is AgeGroup.FROM_65_TO_75
    assert bin_age(75) is AgeGroup.FROM_75_TO_85
    assert bin_age(84) is AgeGroup.FROM_75_TO_85
    assert bin_age(85) is AgeGroup.OVER_85


def test_compute_age_group_completed_years():
    idx = date(2018, 6, 1)
    assert compute_age_group(date(1953, 6, 1), idx) == (65, AgeGroup.FROM_65_TO_75)
    assert compute_age_group(date(1953, 6, 2), idx) == (64, AgeGroup.UNDER_65)
    assert compute_age_group(date(1943, 6, 1), idx)[0] == 75


def test_compute_age_group_birth_after_index():
    with pytest.raises(ValueError, match="after index_date"):
        compute_age_group(date(2019, 1, 1), date(2018, 6, 1))


def test_find_first_ad_date_earliest_and_normalized():
    events = [
        DiagnosisEvent("P1", "G30.9", CodeSystem.ICD10CM, date(2016, 3, 1)),
        DiagnosisEvent("P1", "G309", CodeSystem.ICD10CM, date(2015, 1, 1)),
        DiagnosisEvent("P1", "401.9", CodeSystem.ICD9, date(2010, 1, 1)),
        DiagnosisEvent("P2", "331.0", CodeSystem.ICD9, date(2017, 8, 8)),
    ]
    first = find_first_ad_date(events, ["G30.9", "3310"])
    assert first == {"P1": date(2015, 1, 1), "P2": date(2017, 8, 8)}


# ---------------------------------------------------------------------------
# selection
# ---------------------------------------------------------------------------

WINDOW_START = date(2012, 1, 1)
WINDOW_END = date(2021, 1, 31)


def _eligible_patient(pid, birth="1950-01-01"):
    return [pid, "F", "05", birth]


def test_select_cohort_funnel(build_cohort, tiny_vocab):
    # A eligible; B no AD code; C AD before window; D under age; E no vocab condition
    patients = [
        _eligible_patient("A"),
        _eligible_patient("B"),
        _eligible_patient("C"),
        _eligible_patient("D", birth="2000-01-01"),
        _eligible_patient("E"),
    ]
    diagnoses = [
        ["A", "331.0", "ICD9", "2015-06-01"],
        ["A", "401.9", "ICD9", "2015-01-01"],
        ["B", "401.9", "ICD9", "2015-01-01"],
        ["C", "G30.9", "ICD10CM", "2011-12-31"],
        ["C", "401.9", "ICD9", "2011-06-01"],
        ["D", "331.0", "ICD9", "2015-06-01"],
        ["D", "401.9", "ICD9", "2015-01-01"],
        ["E", "331.0", "ICD9", "2015-06-01"],
    ]
    cohort = build_cohort(patients, diagnoses, vocabulary=tiny_vocab)
    assert cohort.funnel == [
        ("patients_total", 5),
        ("first_ad_diagnosis", 4),
        ("ad_date_in_window", 3),
        ("age_at_index_ge_20", 2),
        ("vocabulary_condition_in_window", 1),
    ]
    assert cohort.patient_ids() == ["A"]
    assert cohort.index_date["A"] == date(2015, 6, 1)
    assert cohort.age_at_index["A"] == 65


def test_select_cohort_window_edges_inclusive(build_cohort):
    patients = [_eligible_patient("S"), _eligible_patient("E")]
    diagnoses = [
        ["S", "331.0", "ICD9", WINDOW_START.isoformat()],
        ["E", "331.0", "ICD9", WINDOW_END.isoformat()],
    ]
    cohort = build_cohort(patients, diagnoses)
    assert sorted(cohort.patient_ids()) == ["E", "S"]


def test_select_cohort_funnel_monotone(build_cohort, tiny_vocab):
    patients = [_eligible_patient(f"P{i}") for i in range(4)]
    diagnoses = [["P0", "331.0", "ICD9", "2015-06-01"], ["P0", "4019", "ICD9", "2015-01-01"]]
    cohort = build_cohort(patients, diagnoses, vocabulary=tiny_vocab)
    counts = [n for _, n in cohort.funnel]
    assert counts == sorted(counts, reverse=True)


def test_select_cohort_dedup_and_ad_exclusion(build_cohort):
    patients = [_eligible_patient("A")]
    diagnoses = [
        ["A", "331.0", "ICD9", "2015-06-01"],
        ["A", "331.0", "ICD9", "2015-09-01"],  # repeat AD stays out of events
        ["A", "401.9", "ICD9", "2015-01-01"],
        ["A", "401.9", "ICD9", "2015-01-01"],  # exact duplicate
        ["A", "4019", "ICD9", "2015-01-01"],  # same code after normalization
        ["A", "401.9", "ICD9", "2014-01-01"],  # distinct date survives
    ]
    cohort = build_cohort(patients, diagnoses)
    events = cohort.pre_index_events["A"]
    assert len(events) == 2
    assert all(ev.event.code not in ("331.0", "3310") for ev in events)
    assert {ev.slot for ev in events} == {1, 3}


def test_select_cohort_drops_out_of_horizon_events(build_cohort):
    idx = date(2018, 6, 1)
    patients = [_eligible_patient("A")]
    diagnoses = [
        ["A", "331.0", "ICD9", idx.isoformat()],
        ["A", "4019", "ICD9", (idx - timedelta(days=1097)).isoformat()],  # last slot day
        ["A", "2724", "ICD9", (idx - timedelta(days=1098)).isoformat()],  # beyond horizon
        ["A", "25000", "ICD9", (idx + timedelta(days=1)).isoformat()],  # post index
    ]
    cohort = build_cohort(patients, diagnoses)
    events = cohort.pre_index_events["A"]
    assert [(ev.phecode, ev.slot) for ev in events] == [("401.1", 6)]


def test_select_cohort_unmapped_code_kept_with_none_phecode(build_cohort):
    patients = [_eligible_patient("A")]
    diagnoses = [
        ["A", "331.0", "ICD9", "2015-06-01"],
        ["A", "V70.0", "ICD9", "2015-01-01"],
    ]
    cohort = build_cohort(patients, diagnoses)
    assert [ev.phecode for ev in cohort.pre_index_events["A"]] == [None]


def test_select_cohort_post_index_prescriptions(build_cohort):
    patients = [_eligible_patient("A")]
    diagnoses = [["A", "331.0", "ICD9", "2015-06-01"]]
    prescriptions = [
        ["A", "100", "2015-06-01"],  # on index date counts
        ["A", "200", "2015-05-31"],  # pre index excluded
        ["A", "300", "2016-06-01"],
        ["Z", "400", "2016-06-01"],  # not in cohort
    ]
    cohort = build_cohort(patients, diagnoses, prescriptions=prescriptions)
    assert sorted(rx.rxcui for rx in cohort.post_index_prescriptions["A"]) == ["100", "300"]


def test_select_cohort_merges_deaths(build_cohort):
    patients = [_eligible_patient("A"), _eligible_patient("B")]
    diagnoses = [
        ["A", "331.0", "ICD9", "2015-06-01"],
        ["B", "331.0", "ICD9", "2015-06-01"],
    ]
    cohort = build_cohort(patients, diagnoses, deaths=[["A", "2017-02-03"]])
    by_id = {p.patient_id: p for p in cohort.patients}
    assert by_id["A"].died and by_id["A"].death_date == date(2017, 2, 3)
    assert not by_id["B"].died and by_id["B"].death_date is None


def test_cohort_config_validation():
    with pytest.raises(ValueError):
        CohortConfig(min_age_years=-1)
    with pytest.raises(ValueError):
        CohortConfig(slot_count=0)
    with pytest.raises(ValueError):
        CohortConfig(window_start=date(2021, 1, 1), window_end=date(2012, 1, 1))


def test_cohort_json_round_trip(build_cohort, tmp_path):
    patients = [_eligible_patient("A"), _eligible_patient("B")]
    diagnoses = [
        ["A", "331.0", "ICD9", "2015-06-01"],
        ["A", "4019", "ICD9", "2015-01-01"],
        ["B", "G30.9", "ICD10CM", "2016-01-01"],
        ["B", "E78.5", "ICD10CM", "2014-06-01"],
    ]
    cohort = build_cohort(
        patients, diagnoses, prescriptions=[["A", "100", "2015-07-01"]], deaths=[["B", "2019-01-01"]]
    )
    path = tmp_path / "cohort.json"
    save_cohort(cohort, path)
    loaded = load_cohort(path)
    assert loaded.patients == cohort.patients
    assert loaded.index_date == cohort.index_date
    assert loaded.age_at_index == cohort.age_at_index
    assert loaded.funnel == cohort.funnel
    assert loaded.config == cohort.config
    for pid in cohort.index_date:
        assert sorted(
            (se.event.code, se.slot, se.phecode) for se in loaded.pre_index_events[pid]
        ) == sorted((se.event.code, se.slot, se.phecode) for se in cohort.pre_index_events[pid])
        assert loaded.post_index_prescriptions[pid] == sorted(
            cohort.post_index_prescriptions[pid], key=lambda r: (r.date, r.rxcui)
        )
    # byte-stable serialization
    save_cohort(loaded, tmp_path / "again.json")
    assert (tmp_path / "again.json").read_bytes() == path.read_bytes()
