"""MIMIC-style CSV ingestion: cohort definition, temporal filtering, one-hot encoding.

The pipeline reads four tables (patients, admissions, diagnoses, procedures),
labels patients carrying any ICD-9 code with prefix "322" as cases, and keeps
case features only from admissions that started strictly before the first
diagnosing admission, so nothing recorded at or after diagnosis can leak into
the feature matrix. The diagnosing admission itself contributes nothing.

Vocabulary and encoding are fully deterministic: vocabulary order is GENDER
first then codes lexicographically; rows are ordered by patient id. Two runs
over the same files produce byte-identical datasets.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .sparse import FeatureVocabulary, LabeledDataset, SparseBinaryMatrix

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
MENINGITIS_PREFIX = "322"
GENDER_FEATURE = "GENDER"
PROCEDURE_PREFIX = "P:"


@dataclass(frozen=True)
class PatientRecord:
    subject_id: str
    gender: str


@dataclass(frozen=True)
class AdmissionRecord:
    subject_id: str
    hadm_id: str
    admit_time: datetime
    discharge_time: datetime | None


@dataclass(frozen=True)
class DiagnosisRecord:
    """One coded event; procedures reuse this shape."""

    subject_id: str
    hadm_id: str
    icd9_code: str


@dataclass
class TableReport:
    rows_read: int = 0
    dropped_missing_ids: int = 0
    dropped_bad_timestamp: int = 0
    dropped_missing_code: int = 0
    duplicates_removed: int = 0

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class IngestReport:
    patients: TableReport = field(default_factory=TableReport)
    admissions: TableReport = field(default_factory=TableReport)
    diagnoses: TableReport = field(default_factory=TableReport)
    procedures: TableReport = field(default_factory=TableReport)
    diagnoses_unknown_admission: int = 0
    procedures_unknown_admission: int = 0
    codes_skipped_not_in_vocabulary: int = 0

    def to_dict(self) -> dict:
        return {
            "patients": self.patients.to_dict(),
            "admissions": self.admissions.to_dict(),
            "diagnoses": self.diagnoses.to_dict(),
            "procedures": self.procedures.to_dict(),
            "diagnoses_unknown_admission": self.diagnoses_unknown_admission,
            "procedures_unknown_admission": self.procedures_unknown_admission,
            "codes_skipped_not_in_vocabulary": self.codes_skipped_not_in_vocabulary,
        }


@dataclass
class EhrTables:
    patients: list
    admissions: list
    diagnoses: list
    procedures: list
    report: IngestReport = field(default_factory=IngestReport)


def normalize_icd9(raw: str) -> str:
    """Trim, uppercase and strip the decimal point: "322.0" -> "3220".

    V- and E-codes keep their letter ("V29.0" -> "V290"). Empty input after
    trimming is rejected.
    """
    code = raw.strip().upper().replace(".", "")
    if not code:
        raise ValueError(f"ICD-9 code is empty after trimming: {raw!r}")
    return code


def is_meningitis_code(code: str) -> bool:
    """True iff the normalized code starts with "322"."""
    return code.startswith(MENINGITIS_PREFIX)


def _subject_sort_key(subject_id: str):
    # numeric ids sort numerically so "9" precedes "10"
    return (0, int(subject_id)) if subject_id.isdigit() else (1, subject_id)


def _open_reader(path, required: tuple, table: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{table} table not found: {path}")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    headers = {name.strip().upper(): name for name in (reader.fieldnames or [])}
    missing = [col for col in required if col not in headers]
    if missing:
        fh.close()
        raise ValueError(f"{table} table {path} missing required columns: {missing}")
    return fh, reader, headers


def _parse_timestamp(raw: str) -> datetime:
    return datetime.strptime(raw.strip(), TIMESTAMP_FORMAT)


def _load_patients(path, report: TableReport) -> list:
    fh, reader, headers = _open_reader(path, ("SUBJECT_ID", "GENDER"), "patients")
    with fh:
        seen = set()
        out = []
        for row in reader:
            report.rows_read += 1
            subject = (row[headers["SUBJECT_ID"]] or "").strip()
            if not subject:
                report.dropped_missing_ids += 1
                continue
            rec = PatientRecord(subject_id=subject,
                                gender=(row[headers["GENDER"]] or "").strip().upper())
            if rec in seen:
                report.duplicates_removed += 1
                continue
            seen.add(rec)
            out.append(rec)
        return out


def _load_admissions(path, report: TableReport) -> list:
    fh, reader, headers = _open_reader(
        path, ("SUBJECT_ID", "HADM_ID", "ADMITTIME", "DISCHTIME"), "admissions")
    with fh:
        seen = set()
        out = []
        for row in reader:
            report.rows_read += 1
            subject = (row[headers["SUBJECT_ID"]] or "").strip()
            hadm = (row[headers["HADM_ID"]] or "").strip()
            if not subject or not hadm:
                report.dropped_missing_ids += 1
                continue
            try:
                admit = _parse_timestamp(row[headers["ADMITTIME"]] or "")
            except ValueError:
                report.dropped_bad_timestamp += 1
                continue
            raw_disch = (row[headers["DISCHTIME"]] or "").strip()
            discharge = None
            if raw_disch:
                try:
                    discharge = _parse_timestamp(raw_disch)
                except ValueError:
                    report.dropped_bad_timestamp += 1
                    continue
            rec = AdmissionRecord(subject_id=subject, hadm_id=hadm,
                                  admit_time=admit, discharge_time=discharge)
            if rec in seen:
                report.duplicates_removed += 1
                continue
            seen.add(rec)
            out.append(rec)
        return out


def _load_coded(path, report: TableReport, table: str) -> list:
    fh, reader, headers = _open_reader(path, ("SUBJECT_ID", "HADM_ID", "ICD9_CODE"), table)
    with fh:
        seen = set()
        out = []
        for row in reader:
            report.rows_read += 1
            subject = (row[headers["SUBJECT_ID"]] or "").strip()
            hadm = (row[headers["HADM_ID"]] or "").strip()
            if not subject or not hadm:
                report.dropped_missing_ids += 1
                continue
            raw_code = (row[headers["ICD9_CODE"]] or "").strip()
            if not raw_code:
                report.dropped_missing_code += 1
                continue
            rec = DiagnosisRecord(subject_id=subject, hadm_id=hadm,
                                  icd9_code=normalize_icd9(raw_code))
            if rec in seen:
                report.duplicates_removed += 1
                continue
            seen.add(rec)
            out.append(rec)
        return out


def load_tables(patients_path, admissions_path, diagnoses_path, procedures_path) -> EhrTables:
    """Parse the four MIMIC-style CSVs into typed records.

    Headers are matched case-insensitively; extra columns are ignored. Rows
    missing subject/admission ids, rows with unparsable timestamps, and rows
    missing a code are dropped and counted; exact duplicate records are
    deduplicated and counted. Missing files or missing required columns are
    fatal.
    """
    report = IngestReport()
    return EhrTables(
        patients=_load_patients(patients_path, report.patients),
        admissions=_load_admissions(admissions_path, report.admissions),
        diagnoses=_load_coded(diagnoses_path, report.diagnoses, "diagnoses"),
        procedures=_load_coded(procedures_path, report.procedures, "procedures"),
        report=report,
    )


@dataclass(frozen=True)
class CohortAssignment:
    """Case/control split plus each case's first diagnosing admission."""

    case_ids: tuple
    control_ids: tuple
    first_dx_admission: dict

    def all_ids(self) -> tuple:
        return self.case_ids + self.control_ids


def _admission_sort_key(adm: AdmissionRecord):
    return (adm.admit_time, _subject_sort_key(adm.hadm_id))


def build_cohorts(tables: EhrTables) -> CohortAssignment:
    """Split patients with >= 1 admission into meningitis cases and controls.

    A case is any patient with at least one admission carrying a "322"-prefix
    code; its first_dx_admission is the earliest such admission by admit time
    (ties broken by smaller hadm_id). Diagnoses referencing unknown admissions
    are dropped and counted in the ingest report.
    """
    adm_by_id = {adm.hadm_id: adm for adm in tables.admissions}
    subjects_with_admissions = {adm.subject_id for adm in tables.admissions}

    tables.report.diagnoses_unknown_admission = 0
    tables.report.procedures_unknown_admission = 0
    dx_admissions: dict = {}
    for dx in tables.diagnoses:
        adm = adm_by_id.get(dx.hadm_id)
        if adm is None or adm.subject_id != dx.subject_id:
            tables.report.diagnoses_unknown_admission += 1
            continue
        if is_meningitis_code(dx.icd9_code):
            dx_admissions.setdefault(dx.subject_id, []).append(adm)
    for proc in tables.procedures:
        adm = adm_by_id.get(proc.hadm_id)
        if adm is None or adm.subject_id != proc.subject_id:
            tables.report.procedures_unknown_admission += 1

    first_dx = {
        subject: min(admissions, key=_admission_sort_key)
        for subject, admissions in dx_admissions.items()
    }
    ordered = sorted(subjects_with_admissions, key=_subject_sort_key)
    cases = tuple(s for s in ordered if s in first_dx)
    controls = tuple(s for s in ordered if s not in first_dx)
    return CohortAssignment(case_ids=cases, control_ids=controls, first_dx_admission=first_dx)


def _eligible(subject: str, adm: AdmissionRecord | None, cohorts: CohortAssignment) -> bool:
    """Controls contribute every admission; cases only strictly-pre-diagnosis ones."""
    if adm is None:
        return False
    cutoff = cohorts.first_dx_admission.get(subject)
    if cutoff is None:
        return True
    return adm.admit_time < cutoff.admit_time


def _iter_coded_events(tables: EhrTables, include_procedures: bool):
    adm_by_id = {adm.hadm_id: adm for adm in tables.admissions}
    for dx in tables.diagnoses:
        yield dx.subject_id, adm_by_id.get(dx.hadm_id), dx.icd9_code
    if include_procedures:
        for proc in tables.procedures:
            adm = adm_by_id.get(proc.hadm_id)
            yield proc.subject_id, adm, PROCEDURE_PREFIX + proc.icd9_code


def build_vocabulary(tables: EhrTables, cohorts: CohortAssignment,
                     include_procedures: bool = False) -> FeatureVocabulary:
    """GENDER plus every distinct non-meningitis code visible pre-diagnosis.

    A code enters the vocabulary if it appears in any control admission, or in
    a case admission that started strictly before that case's first diagnosing
    admission. Codes with the "322" prefix never enter. Order is GENDER first,
    then lexicographic.
    """
    codes = set()
    for subject, adm, code in _iter_coded_events(tables, include_procedures):
        if is_meningitis_code(code.removeprefix(PROCEDURE_PREFIX)):
            continue
        if _eligible(subject, adm, cohorts):
            codes.add(code)
    return FeatureVocabulary([GENDER_FEATURE, *sorted(codes)])


def encode_features(tables: EhrTables, cohorts: CohortAssignment,
                    vocab: FeatureVocabulary,
                    include_procedures: bool = False) -> LabeledDataset:
    """One-hot encode eligible codes per patient over a fixed vocabulary.

    Rows are ordered by patient id; GENDER is 1 for male. Eligible codes not
    present in the vocabulary are skipped and counted in the ingest report.
    Labels are 1 for cases.
    """
    gender = {p.subject_id: p.gender for p in tables.patients}
    case_set = set(cohorts.case_ids)
    subjects = sorted(cohorts.all_ids(), key=_subject_sort_key)
    row_of = {s: i for i, s in enumerate(subjects)}

    active: list = [set() for _ in subjects]
    gender_col = vocab.index(GENDER_FEATURE)
    for subject, g in gender.items():
        if subject in row_of and g == "M":
            active[row_of[subject]].add(gender_col)

    skipped = 0
    for subject, adm, code in _iter_coded_events(tables, include_procedures):
        if subject not in row_of or not _eligible(subject, adm, cohorts):
            continue
        if is_meningitis_code(code.removeprefix(PROCEDURE_PREFIX)):
            continue
        if code not in vocab:
            skipped += 1
            continue
        active[row_of[subject]].add(vocab.index(code))
    tables.report.codes_skipped_not_in_vocabulary = skipped

    return LabeledDataset(
        features=SparseBinaryMatrix.from_rows(active, len(vocab)),
        labels=np.array([1 if s in case_set else 0 for s in subjects], dtype=np.int8),
        sample_ids=tuple(subjects),
        vocab_fingerprint=vocab.fingerprint(),
    )


def save_dataset(dataset: LabeledDataset, vocab: FeatureVocabulary, path) -> None:
    """Write the JSON dataset container: vocabulary, sparse rows, labels, ids."""
    payload = {
        "format": "ehrstack-dataset-v1",
        "vocabulary": list(vocab.entries),
        "rows": [row.tolist() for row in dataset.features.rows],
        "labels": dataset.labels.tolist(),
        "sample_ids": list(dataset.sample_ids),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_dataset(path) -> tuple[LabeledDataset, FeatureVocabulary]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format") != "ehrstack-dataset-v1":
        raise ValueError(f"unrecognized dataset file format in {path}")
    vocab = FeatureVocabulary(payload["vocabulary"])
    dataset = LabeledDataset(
        features=SparseBinaryMatrix.from_rows(payload["rows"], len(vocab)),
        labels=np.asarray(payload["labels"], dtype=np.int8),
        sample_ids=tuple(payload["sample_ids"]),
        vocab_fingerprint=vocab.fingerprint(),
    )
    return dataset, vocab
