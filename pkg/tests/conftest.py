"""Shared builders for the test suite."""

import csv
import os

# match the CLI's determinism posture: pin BLAS pools before numpy loads
for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
):
    os.environ.setdefault(_var, "1")

import pytest

from adsubtype.cohort import CodeSystem, CohortConfig, TablePaths, parse_tables, select_cohort
from adsubtype.phenotype import PhecodeMap, PhenotypeVocabulary

I9 = CodeSystem.ICD9
I10 = CodeSystem.ICD10CM


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


@pytest.fixture
def tiny_pmap():
    """Minimal phecode map: three conditions plus the AD phecode itself."""
    return PhecodeMap(
        {
            ("4019", I9): ("401.1", "Essential hypertension"),
            ("I10", I10): ("401.1", "Essential hypertension"),
            ("2724", I9): ("272.1", "Hyperlipidemia"),
            ("E785", I10): ("272.1", "Hyperlipidemia"),
            ("25000", I9): ("250.2", "Type 2 diabetes"),
            ("E119", I10): ("250.2", "Type 2 diabetes"),
            ("3310", I9): ("290.11", "Alzheimer's disease"),
            ("G309", I10): ("290.11", "Alzheimer's disease"),
        }
    )


@pytest.fixture
def tiny_vocab():
    return PhenotypeVocabulary(
        (
            ("401.1", "Essential hypertension"),
            ("272.1", "Hyperlipidemia"),
            ("250.2", "Type 2 diabetes"),
        )
    )


@pytest.fixture
def table_writer(tmp_path):
    """Write the four raw input tables from row tuples; returns TablePaths."""

    def write(patients=(), diagnoses=(), prescriptions=(), deaths=()):
        write_csv(tmp_path / "patients.csv", ["patient_id", "sex", "race", "birth_date"], patients)
        write_csv(tmp_path / "diagnoses.csv", ["patient_id", "code", "system", "date"], diagnoses)
        write_csv(tmp_path / "prescriptions.csv", ["patient_id", "rxcui", "date"], prescriptions)
        write_csv(tmp_path / "deaths.csv", ["patient_id", "death_date"], deaths)
        return TablePaths(
            demographics=tmp_path / "patients.csv",
            diagnoses=tmp_path / "diagnoses.csv",
            prescriptions=tmp_path / "prescriptions.csv",
            deaths=tmp_path / "deaths.csv",
        )

    return write


@pytest.fixture
def build_cohort(tiny_pmap, table_writer):
    """End-to-end cohort from raw rows with the tiny phecode map."""

    def build(patients, diagnoses, prescriptions=(), deaths=(), config=None, vocabulary=None):
        tables = parse_tables(table_writer(patients, diagnoses, prescriptions, deaths))
        return select_cohort(tables, config or CohortConfig(), tiny_pmap, vocabulary=vocabulary)

    return build
