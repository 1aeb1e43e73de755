import numpy as np
import pytest

from ehrstack.forest import fit_forest, gini_importance
from ehrstack.ingest import (build_cohorts, build_vocabulary, encode_features,
                             load_tables)
from ehrstack.rng import RngPlan
from ehrstack.sampling import undersample_balanced
from ehrstack.synthetic import (DEFAULT_RISK_CODES, RiskCode, SyntheticSpec,
                                code_rates, emit_csvs, generate_cohort)


def encode(tables):
    cohorts = build_cohorts(tables)
    vocab = build_vocabulary(tables, cohorts)
    return cohorts, vocab, encode_features(tables, cohorts, vocab)


class TestSpecValidation:
    def test_defaults_are_sane(self):
        spec = SyntheticSpec()
        assert spec.prevalence == pytest.approx(0.0046)
        assert len(spec.risk_codes) == 6

    def test_vocab_smaller_than_risk_codes_rejected(self):
        with pytest.raises(ValueError, match="vocabulary"):
            SyntheticSpec(vocab_size=3)

    def test_risk_code_collision_with_target_prefix_rejected(self):
        with pytest.raises(ValueError, match="prefix"):
            RiskCode("3221", 5.0)

    def test_round_trips_through_dict(self):
        spec = SyntheticSpec(n_patients=100, exact_cases=10, seed=5)
        again = SyntheticSpec.from_dict(spec.to_dict())
        assert again == spec


class TestGenerateCohort:
    def test_binomial_case_count_within_4_sigma(self):
        spec = SyntheticSpec(n_patients=50_000, vocab_size=50, seed=3)
        tables = generate_cohort(spec)
        cohorts = build_cohorts(tables)
        n = len(cohorts.case_ids)
        mean = 50_000 * spec.prevalence
        sigma = np.sqrt(mean * (1 - spec.prevalence))
        assert abs(n - mean) <= 4 * sigma

    def test_exact_case_count(self):
        spec = SyntheticSpec(n_patients=500, exact_cases=40, seed=1)
        tables = generate_cohort(spec)
        cohorts = build_cohorts(tables)
        assert len(cohorts.case_ids) == 40
        assert len(cohorts.control_ids) == 460

    def test_null_odds_ratio_balances_rates(self):
        # with all odds ratios at 1 the case/control code rates must agree
        codes = tuple(RiskCode(c.code, 1.0) for c in DEFAULT_RISK_CODES)
        spec = SyntheticSpec(n_patients=4000, exact_cases=2000, vocab_size=30,
                             risk_codes=codes, risk_control_rate=0.2, seed=7)
        tables = generate_cohort(spec)
        cohorts, vocab, ds = encode(tables)
        labels = ds.labels
        for rc in codes:
            j = vocab.index(rc.code)
            col = np.array([j in set(ds.features.row(i).tolist())
                            for i in range(ds.n_samples)])
            case_rate = col[labels == 1].mean()
            control_rate = col[labels == 0].mean()
            assert case_rate == pytest.approx(control_rate, rel=0.15)

    def test_cases_have_diagnosis_only_at_or_after_designated_admission(self):
        spec = SyntheticSpec(n_patients=400, exact_cases=30, seed=11)
        tables = generate_cohort(spec)
        adm_by_id = {a.hadm_id: a for a in tables.admissions}
        cohorts = build_cohorts(tables)
        for subject in cohorts.case_ids:
            first_dx = cohorts.first_dx_admission[subject]
            dx_times = [adm_by_id[d.hadm_id].admit_time
                        for d in tables.diagnoses
                        if d.subject_id == subject and d.icd9_code.startswith("322")]
            assert all(t >= first_dx.admit_time for t in dx_times)

    def test_control_code_prevalence_within_3_sigma(self):
        spec = SyntheticSpec(n_patients=3000, exact_cases=0, vocab_size=40, seed=13)
        tables = generate_cohort(spec)
        cohorts, vocab, ds = encode(tables)
        control_rates, _ = code_rates(spec)
        # spot-check a few background columns (risk codes sit first)
        for idx in (len(spec.risk_codes), len(spec.risk_codes) + 5):
            # map the code universe index to the vocabulary column
            codes = [rc.code for rc in spec.risk_codes]
            universe = codes + [e for e in vocab.entries
                                if e != "GENDER" and e not in codes]
            code = universe[idx]
            if code not in vocab:
                continue
            j = vocab.index(code)
            count = ds.features.column_support(j)
            rate = control_rates[idx]
            sigma = np.sqrt(3000 * rate * (1 - rate))
            assert abs(count - 3000 * rate) <= 3 * sigma

    def test_fixed_seed_reproduces_csv_bytes(self, tmp_path):
        spec = SyntheticSpec(n_patients=200, exact_cases=15, seed=21)
        paths_a = emit_csvs(generate_cohort(spec), tmp_path / "a")
        paths_b = emit_csvs(generate_cohort(spec), tmp_path / "b")
        for key in paths_a:
            a = open(paths_a[key], "rb").read()
            b = open(paths_b[key], "rb").read()
            assert a == b

    def test_planted_code_recovered_by_forest_importance(self):
        spec = SyntheticSpec(n_patients=2500, exact_cases=80, vocab_size=120, seed=9)
        tables = generate_cohort(spec)
        cohorts, vocab, ds = encode(tables)
        cases = np.flatnonzero(ds.labels == 1)
        controls = np.flatnonzero(ds.labels == 0)
        train_idx = undersample_balanced(cases, controls, np.random.default_rng(0))
        forest = fit_forest(ds.subset(train_idx), n_trees=60, rng_plan=RngPlan(1))
        imp = gini_importance(forest)
        top5 = [vocab.entries[j] for j in np.argsort(-imp, kind="stable")[:5]]
        assert "3314" in top5  # odds ratio 20 code


class TestEmitCsvs:
    def test_round_trip_identity(self, tmp_path):
        spec = SyntheticSpec(n_patients=150, exact_cases=12, seed=2)
        tables = generate_cohort(spec)
        paths = emit_csvs(tables, tmp_path)
        loaded = load_tables(paths["patients"], paths["admissions"],
                             paths["diagnoses"], paths["procedures"])
        assert set(loaded.patients) == set(tables.patients)
        assert set(loaded.admissions) == set(tables.admissions)
        assert set(loaded.diagnoses) == set(tables.diagnoses)
        assert set(loaded.procedures) == set(tables.procedures)
        assert loaded.report.admissions.dropped_missing_ids == 0

    def test_headers_match_mimic_names(self, tmp_path):
        spec = SyntheticSpec(n_patients=5, exact_cases=1, seed=0)
        paths = emit_csvs(generate_cohort(spec), tmp_path)
        assert open(paths["patients"]).readline().strip() == "ROW_ID,SUBJECT_ID,GENDER"
        assert open(paths["admissions"]).readline().strip() == \
            "ROW_ID,SUBJECT_ID,HADM_ID,ADMITTIME,DISCHTIME"
        assert open(paths["diagnoses"]).readline().strip() == \
            "ROW_ID,SUBJECT_ID,HADM_ID,SEQ_NUM,ICD9_CODE"

    def test_zero_patient_spec_writes_headers_only(self, tmp_path):
        spec = SyntheticSpec(n_patients=0, vocab_size=10, seed=0)
        paths = emit_csvs(generate_cohort(spec), tmp_path)
        for path in paths.values():
            lines = open(path).read().strip().splitlines()
            assert len(lines) == 1
