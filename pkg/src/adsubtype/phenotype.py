"""Phecode mapping, phenotype vocabulary ranking, and binary feature matrices.

ICD codes are grouped into phenotypes via a phecode map; phenotypes are
ranked by distinct-patient prevalence across the pre-index timeslots; the
top survivors form the vocabulary whose aggregate (N x V) or temporal
(N x V*S) binary matrices feed the clustering stage.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .cohort import Cohort, CodeSystem, DiagnosisEvent, normalize_code

log = logging.getLogger(__name__)

AGGREGATE = "aggregate"
TEMPORAL = "temporal"


@dataclass(frozen=True)
class PhecodeMap:
    """Exact-match lookup from (normalized ICD code, system) to phecode."""

    entries: Mapping[tuple[str, CodeSystem], tuple[str, str]]

    def lookup(self, code: str, system: CodeSystem) -> str | None:
        hit = self.entries.get((normalize_code(code), system))
        return hit[0] if hit else None

    def phenotype_name(self, phecode: str) -> str | None:
        for code, name in self.entries.values():
            if code == phecode:
                return name
        return None

    def names_by_phecode(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for code, name in self.entries.values():
            out.setdefault(code, name)
        return out

    def codes_for_phecode(self, phecode: str) -> list[tuple[str, CodeSystem]]:
        return sorted(
            (code, system)
            for (code, system), (pc, _) in self.entries.items()
            if pc == phecode
        )

    def __len__(self) -> int:
        return len(self.entries)


_SYSTEM_FLAGS = {"9": CodeSystem.ICD9, "10": CodeSystem.ICD10CM}


def load_phecode_map(path: Path) -> PhecodeMap:
    """Load a phecode map CSV with columns icd_code,system_flag,phecode,phenotype.

    system_flag is 9 or 10. Duplicate (code, system) rows mapping to
    conflicting phecodes are fatal; the error lists the offending rows.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"phecode map not found: {path}")
    entries: dict[tuple[str, CodeSystem], tuple[str, str]] = {}
    first_row: dict[tuple[str, CodeSystem], int] = {}
    conflicts: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"icd_code", "system_flag", "phecode", "phenotype"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(
                f"{path}: header must contain {sorted(required)}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            flag = row["system_flag"].strip()
            if flag not in _SYSTEM_FLAGS:
                raise ValueError(f"{path}:{lineno}: system_flag must be 9 or 10, got {flag!r}")
            key = (normalize_code(row["icd_code"]), _SYSTEM_FLAGS[flag])
            value = (row["phecode"].strip(), row["phenotype"].strip())
            if key in entries:
                if entries[key][0] != value[0]:
                    conflicts.append(
                        f"({row['icd_code'].strip()}, ICD{flag}) -> {entries[key][0]} at row "
                        f"{first_row[key]} vs {value[0]} at row {lineno}"
                    )
                continue
            entries[key] = value
            first_row[key] = lineno
    if conflicts:
        raise ValueError(f"{path}: conflicting phecode mappings: " + "; ".join(conflicts))
    if not entries:
        log.warning("%s: phecode map is empty", path)
    return PhecodeMap(entries)


def map_diagnosis(event: DiagnosisEvent, pmap: PhecodeMap) -> str | None:
    """Phecode for a diagnosis event, or None when unmapped."""
    return pmap.lookup(event.code, event.system)


@dataclass(frozen=True)
class PhenotypeVocabulary:
    """Ranked phenotype list (most prevalent first) used as feature columns."""

    phecodes: tuple[tuple[str, str], ...]
    exclusions: frozenset[str] = frozenset()

    def __post_init__(self):
        codes = [code for code, _ in self.phecodes]
        if len(codes) != len(set(codes)):
            raise ValueError("vocabulary contains duplicate phecodes")

    def __len__(self) -> int:
        return len(self.phecodes)

    def codes(self) -> list[str]:
        return [code for code, _ in self.phecodes]

    def phecode_set(self) -> frozenset[str]:
        return frozenset(code for code, _ in self.phecodes)

    def name_of(self, phecode: str) -> str:
        for code, name in self.phecodes:
            if code == phecode:
                return name
        raise KeyError(phecode)


def rank_phenotypes(
    cohort: Cohort,
    pmap: PhecodeMap,
    review_size: int = 60,
    keep: int = 40,
    exclusions: Iterable[str] = (),
) -> tuple[PhenotypeVocabulary, list[tuple[str, str, int]]]:
    """Rank phecodes by distinct-patient prevalence and build the vocabulary.

    Counts the number of distinct patients carrying each phecode in any
    timeslot, emits the top review_size as a frequency table, removes the
    exclusion list (the mechanized stand-in for manual review), and keeps the
    first `keep` survivors. Ties break by phecode string ascending. The AD
    phecodes themselves (whatever the map sends the configured AD codes to)
    never enter the ranking.
    """
    ad_phecodes = {
        pmap.lookup(code, system)
        for code in cohort.config.ad_code_set
        for system in (CodeSystem.ICD9, CodeSystem.ICD10CM)
    } - {None}

    patients_by_phecode: dict[str, set[str]] = {}
    for pid, events in cohort.pre_index_events.items():
        for se in events:
            if se.phecode is None or se.phecode in ad_phecodes:
                continue
            patients_by_phecode.setdefault(se.phecode, set()).add(pid)

    ranked = sorted(
        patients_by_phecode.items(), key=lambda kv: (-len(kv[1]), kv[0])
    )[:review_size]
    names = pmap.names_by_phecode()
    freq_table = [(code, names.get(code, ""), len(pids)) for code, pids in ranked]

    excl = frozenset(exclusions)
    survivors = [(code, name) for code, name, _ in freq_table if code not in excl][:keep]
    if len(survivors) < keep:
        raise ValueError(
            f"only {len(survivors)} distinct phecodes survive ranking; {keep} required"
        )
    return PhenotypeVocabulary(tuple(survivors), exclusions=excl), freq_table


@dataclass
class CoverageReport:
    mapped: int
    unmapped: int

    @property
    def total(self) -> int:
        return self.mapped + self.unmapped

    @property
    def pct_mapped(self) -> float:
        return 100.0 * self.mapped / self.total if self.total else 0.0


def coverage_report(cohort: Cohort) -> CoverageReport:
    mapped = unmapped = 0
    for events in cohort.pre_index_events.values():
        for se in events:
            if se.phecode is None:
                unmapped += 1
            else:
                mapped += 1
    return CoverageReport(mapped, unmapped)


@dataclass
class FeatureMatrix:
    """Binary patient-by-condition matrix.

    Aggregate layout has one column per phecode; temporal layout has one
    column per (phecode, slot), phecode-major and slot-minor.
    """

    patient_ids: list[str]
    layout: str
    values: np.ndarray
    columns: list[tuple[str, int | None]]
    slot_count: int | None = None

    def column_labels(self) -> list[str]:
        return [
            code if slot is None else f"{code}_s{slot}" for code, slot in self.columns
        ]

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)


def build_temporal_matrix(cohort: Cohort, vocabulary: PhenotypeVocabulary) -> FeatureMatrix:
    """N x (V*S) binary matrix: entry 1 iff the patient has the phecode in the slot."""
    codes = vocabulary.codes()
    col_of = {code: i for i, code in enumerate(codes)}
    s = cohort.config.slot_count
    pids = cohort.patient_ids()
    values = np.zeros((len(pids), len(codes) * s), dtype=np.uint8)
    for i, pid in enumerate(pids):
        for se in cohort.pre_index_events.get(pid, []):
            j = col_of.get(se.phecode)
            if j is not None:
                values[i, j * s + (se.slot - 1)] = 1
    _assert_rows_nonzero(values, pids)
    columns = [(code, slot) for code in codes for slot in range(1, s + 1)]
    return FeatureMatrix(pids, TEMPORAL, values, columns, slot_count=s)


def build_aggregate_matrix(cohort: Cohort, vocabulary: PhenotypeVocabulary) -> FeatureMatrix:
    """N x V binary matrix: entry 1 iff the patient has the phecode in any slot."""
    codes = vocabulary.codes()
    col_of = {code: i for i, code in enumerate(codes)}
    pids = cohort.patient_ids()
    values = np.zeros((len(pids), len(codes)), dtype=np.uint8)
    for i, pid in enumerate(pids):
        for se in cohort.pre_index_events.get(pid, []):
            j = col_of.get(se.phecode)
            if j is not None:
                values[i, j] = 1
    _assert_rows_nonzero(values, pids)
    columns = [(code, None) for code in codes]
    return FeatureMatrix(pids, AGGREGATE, values, columns)


def aggregate_from_temporal(fm: FeatureMatrix) -> FeatureMatrix:
    """Slot-wise OR of a temporal matrix; equals the aggregate matrix exactly."""
    if fm.layout != TEMPORAL:
        raise ValueError(f"expected temporal layout, got {fm.layout}")
    s = fm.slot_count
    n, vs = fm.values.shape
    values = fm.values.reshape(n, vs // s, s).max(axis=2).astype(np.uint8)
    columns = [(code, None) for code, slot in fm.columns if slot == 1]
    return FeatureMatrix(fm.patient_ids, AGGREGATE, values, columns)


def _assert_rows_nonzero(values: np.ndarray, pids: list[str]) -> None:
    empty = np.flatnonzero(values.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(
            f"feature matrix has all-zero rows (cohort criterion violated), e.g. patient "
            f"{pids[int(empty[0])]!r}"
        )


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------


def write_feature_csv(fm: FeatureMatrix, path: Path, meta: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(["patient_id"] + fm.column_labels())
        for pid, row in zip(fm.patient_ids, fm.values):
            writer.writerow([pid] + [int(v) for v in row])


def read_feature_csv(path: Path) -> FeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    labels = header[1:]
    columns: list[tuple[str, int | None]] = []
    layout = AGGREGATE
    for label in labels:
        code, sep, slot = label.rpartition("_s")
        if sep and slot.isdigit():
            columns.append((code, int(slot)))
            layout = TEMPORAL
        else:
            columns.append((label, None))
    pids: list[str] = []
    rows: list[list[int]] = []
    for row in reader:
        pids.append(row[0])
        rows.append([int(v) for v in row[1:]])
    values = np.array(rows, dtype=np.uint8) if rows else np.zeros((0, len(columns)), dtype=np.uint8)
    slot_count = max((s for _, s in columns if s is not None), default=None)
    return FeatureMatrix(pids, layout, values, columns, slot_count=slot_count)


def write_vocabulary_csv(
    vocabulary: PhenotypeVocabulary,
    path: Path,
    counts: Mapping[str, int] | None = None,
    meta: str | None = None,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if meta:
            fh.write(f"# {meta}\n")
        writer = csv.writer(fh)
        writer.writerow(["rank", "phecode", "phenotype", "patient_count"])
        for rank, (code, name) in enumerate(vocabulary.phecodes, start=1):
            count = counts.get(code, "") if counts else ""
            writer.writerow([rank, code, name, count])


def load_vocabulary_csv(path: Path) -> PhenotypeVocabulary:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"vocabulary file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    required = {"rank", "phecode", "phenotype"}
    if reader.fieldnames is None or not required.issubset(reader.fieldnames):
        raise ValueError(f"{path}: header must contain {sorted(required)}")
    rows = sorted(reader, key=lambda r: int(r["rank"]))
    return PhenotypeVocabulary(
        tuple((r["phecode"].strip(), r["phenotype"].strip()) for r in rows)
    )
