"""Synthetic MIMIC-schema cohorts with planted risk codes.

The real cohort is credential-gated, so the pipeline is exercised on generated
tables instead: independent Bernoulli code draws per patient, with each risk
code's odds multiplied for cases by its configured odds ratio. Every case gets
a designated diagnosing admission carrying a "3220" code; its informative
codes land only in strictly earlier admissions, so generated cohorts pass the
temporal filter by construction. Output is deterministic per seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np

from .ingest import (AdmissionRecord, DiagnosisRecord, EhrTables,
                     MENINGITIS_PREFIX, PatientRecord)

DIAGNOSIS_CODE = "3220"


@dataclass(frozen=True)
class RiskCode:
    """A planted predictive code: cases carry it with odds multiplied by odds_ratio."""

    code: str
    odds_ratio: float
    control_rate: float | None = None  # falls back to the background rate

    def __post_init__(self):
        if self.odds_ratio <= 0:
            raise ValueError("odds ratio must be positive")
        if self.code.startswith(MENINGITIS_PREFIX):
            raise ValueError("risk codes must not collide with the diagnosis prefix")


# themed after hydrocephalus / hemorrhage / convulsion codes; the statistics
# live entirely in the odds ratios
DEFAULT_RISK_CODES = (
    RiskCode("3314", 20.0),
    RiskCode("430", 16.0),
    RiskCode("431", 12.0),
    RiskCode("78039", 10.0),
    RiskCode("99663", 7.0),
    RiskCode("3453", 5.0),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the generative model.

    Labels are Bernoulli(prevalence) unless exact_cases is set, in which case
    exactly that many patients (chosen by seeded shuffle) become cases.
    """

    n_patients: int = 5060
    prevalence: float = 0.0046
    vocab_size: int = 400
    risk_codes: tuple = DEFAULT_RISK_CODES
    background_rate: float = 0.008
    risk_control_rate: float = 0.12
    mean_admissions: float = 2.2
    post_dx_admission_rate: float = 0.3
    male_fraction: float = 0.56
    seed: int = 0
    exact_cases: int | None = None

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must be in (0, 1)")
        for rate in (self.background_rate, self.risk_control_rate,
                     self.post_dx_admission_rate, self.male_fraction):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must be in [0, 1]")
        if self.vocab_size < len(self.risk_codes):
            raise ValueError(
                f"vocabulary size {self.vocab_size} smaller than "
                f"{len(self.risk_codes)} risk codes"
            )

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "prevalence": self.prevalence,
            "vocab_size": self.vocab_size,
            "risk_codes": [
                {"code": rc.code, "odds_ratio": rc.odds_ratio, "control_rate": rc.control_rate}
                for rc in self.risk_codes
            ],
            "background_rate": self.background_rate,
            "risk_control_rate": self.risk_control_rate,
            "mean_admissions": self.mean_admissions,
            "post_dx_admission_rate": self.post_dx_admission_rate,
            "male_fraction": self.male_fraction,
            "seed": self.seed,
            "exact_cases": self.exact_cases,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "risk_codes" in d:
            d["risk_codes"] = tuple(
                RiskCode(rc["code"], rc["odds_ratio"], rc.get("control_rate"))
                for rc in d["risk_codes"]
            )
        return cls(**d)


def _code_universe(spec: SyntheticSpec) -> list[str]:
    """Deterministic non-meningitis code list: risk codes then filler codes."""
    codes = [rc.code for rc in spec.risk_codes]
    taken = set(codes)
    base = 4000
    while len(codes) < spec.vocab_size:
        candidate = str(base)
        base += 1
        if candidate.startswith(MENINGITIS_PREFIX) or candidate in taken:
            continue
        codes.append(candidate)
        taken.add(candidate)
    return codes


def _tilted_rate(control_rate: float, odds_ratio: float) -> float:
    odds = control_rate / (1.0 - control_rate) * odds_ratio
    return odds / (1.0 + odds)


def code_rates(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    """(control_rates, case_rates) over the code universe, risk codes first."""
    control = np.full(spec.vocab_size, spec.background_rate)
    case = np.full(spec.vocab_size, spec.background_rate)
    for j, rc in enumerate(spec.risk_codes):
        base = rc.control_rate if rc.control_rate is not None else spec.risk_control_rate
        control[j] = base
        case[j] = _tilted_rate(base, rc.odds_ratio)
    return control, case


def generate_cohort(spec: SyntheticSpec) -> EhrTables:
    """Generate the four tables for one synthetic cohort.

    Cases receive their informative codes in admissions strictly before the
    designated diagnosing admission (which carries the "3220" code); optional
    post-diagnosis admissions carry background codes that the temporal filter
    must discard. Controls spread their codes over all admissions.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    codes = _code_universe(spec)
    control_rates, case_rates = code_rates(spec)

    if spec.exact_cases is not None:
        if spec.exact_cases > spec.n_patients:
            raise ValueError("exact_cases exceeds n_patients")
        labels = np.zeros(spec.n_patients, dtype=np.int8)
        labels[rng.permutation(spec.n_patients)[:spec.exact_cases]] = 1
    else:
        labels = (rng.random(spec.n_patients) < spec.prevalence).astype(np.int8)

    patients: list = []
    admissions: list = []
    diagnoses: list = []
    procedures: list = []
    base_time = datetime(2100, 1, 1, 8, 0, 0)
    hadm_counter = 100000

    for i in range(spec.n_patients):
        subject = str(i + 1)
        is_case = bool(labels[i])
        patients.append(PatientRecord(
            subject_id=subject,
            gender="M" if rng.random() < spec.male_fraction else "F",
        ))

        n_pre = max(1, int(rng.poisson(spec.mean_admissions - 1)) + 1)
        n_post = 0
        if is_case and rng.random() < spec.post_dx_admission_rate:
            n_post = 1
        n_adm = n_pre + (1 if is_case else 0) + n_post

        start = base_time + timedelta(days=int(rng.integers(0, 3650)))
        adm_ids = []
        for a in range(n_adm):
            hadm_counter += 1
            hadm = str(hadm_counter)
            admit = start + timedelta(days=a * 40 + int(rng.integers(0, 30)), hours=a)
            stay = timedelta(days=int(rng.integers(1, 12)), hours=int(rng.integers(1, 23)))
            admissions.append(AdmissionRecord(
                subject_id=subject, hadm_id=hadm,
                admit_time=admit, discharge_time=admit + stay,
            ))
            adm_ids.append(hadm)

        rates = case_rates if is_case else control_rates
        carried = np.flatnonzero(rng.random(spec.vocab_size) < rates)
        if is_case:
            dx_adm = adm_ids[n_pre]
            diagnoses.append(DiagnosisRecord(subject_id=subject, hadm_id=dx_adm,
                                             icd9_code=DIAGNOSIS_CODE))
            feature_adm_ids = adm_ids[:n_pre]
            post_ids = adm_ids[n_pre + 1:]
            for j in np.flatnonzero(rng.random(spec.vocab_size) < control_rates):
                if post_ids:
                    diagnoses.append(DiagnosisRecord(
                        subject_id=subject,
                        hadm_id=post_ids[int(rng.integers(0, len(post_ids)))],
                        icd9_code=codes[int(j)],
                    ))
        else:
            feature_adm_ids = adm_ids
        for j in carried:
            target = feature_adm_ids[int(rng.integers(0, len(feature_adm_ids)))]
            diagnoses.append(DiagnosisRecord(subject_id=subject, hadm_id=target,
                                             icd9_code=codes[int(j)]))

        if rng.random() < 0.15:
            target = adm_ids[int(rng.integers(0, len(adm_ids)))]
            procedures.append(DiagnosisRecord(subject_id=subject, hadm_id=target,
                                              icd9_code=str(int(rng.integers(10, 999)))))

    # canonical order: id-sorted patients, per-patient chronological admissions
    diagnoses.sort(key=lambda d: (int(d.subject_id), int(d.hadm_id), d.icd9_code))
    procedures.sort(key=lambda d: (int(d.subject_id), int(d.hadm_id), d.icd9_code))
    return EhrTables(patients=patients, admissions=admissions,
                     diagnoses=diagnoses, procedures=procedures)


def _write_csv(path: Path, headers: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        writer.writerows(rows)


def emit_csvs(tables: EhrTables, directory) -> dict:
    """Write the four tables with MIMIC-III column names; returns the paths.

    The files round-trip losslessly through ingest.load_tables.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "patients": directory / "PATIENTS.csv",
        "admissions": directory / "ADMISSIONS.csv",
        "diagnoses": directory / "DIAGNOSES_ICD.csv",
        "procedures": directory / "PROCEDURES_ICD.csv",
    }
    _write_csv(paths["patients"], ["ROW_ID", "SUBJECT_ID", "GENDER"],
               [[i + 1, p.subject_id, p.gender] for i, p in enumerate(tables.patients)])
    _write_csv(paths["admissions"],
               ["ROW_ID", "SUBJECT_ID", "HADM_ID", "ADMITTIME", "DISCHTIME"],
               [[i + 1, a.subject_id, a.hadm_id,
                 a.admit_time.strftime("%Y-%m-%d %H:%M:%S"),
                 a.discharge_time.strftime("%Y-%m-%d %H:%M:%S") if a.discharge_time else ""]
                for i, a in enumerate(tables.admissions)])
    for key in ("diagnoses", "procedures"):
        records = getattr(tables, key)
        _write_csv(paths[key],
                   ["ROW_ID", "SUBJECT_ID", "HADM_ID", "SEQ_NUM", "ICD9_CODE"],
                   [[i + 1, r.subject_id, r.hadm_id, 1, r.icd9_code]
                    for i, r in enumerate(records)])
    return {k: str(v) for k, v in paths.items()}
