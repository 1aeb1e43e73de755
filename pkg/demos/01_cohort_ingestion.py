"""Generate a synthetic MIMIC-style cohort and walk it through ingestion.

Shows the four CSV tables, the case/control split with temporal filtering,
the vocabulary, and the one-hot encoded dataset.
"""

import tempfile
from pathlib import Path

from ehrstack.ingest import (build_cohorts, build_vocabulary, encode_features,
                             load_tables)
from ehrstack.synthetic import SyntheticSpec, emit_csvs, generate_cohort

workdir = Path(tempfile.mkdtemp(prefix="ehrstack-demo-"))

spec = SyntheticSpec(n_patients=2000, exact_cases=50, vocab_size=150, seed=7)
tables = generate_cohort(spec)
paths = emit_csvs(tables, workdir)
print("wrote synthetic tables:")
for name, path in paths.items():
    n_lines = sum(1 for _ in open(path)) - 1
    print(f"  {name:<11} {n_lines:>6} rows  {path}")

# parse them back exactly the way real MIMIC extracts would be parsed
tables = load_tables(paths["patients"], paths["admissions"],
                     paths["diagnoses"], paths["procedures"])
print("\ningest report (drops / dedups):")
for table, counts in tables.report.to_dict().items():
    if isinstance(counts, dict):
        print(f"  {table:<11} {counts}")

cohorts = build_cohorts(tables)
print(f"\ncohorts: {len(cohorts.case_ids)} cases, {len(cohorts.control_ids)} controls")
example_case = cohorts.case_ids[0]
first_dx = cohorts.first_dx_admission[example_case]
print(f"example case {example_case}: first diagnosing admission {first_dx.hadm_id} "
      f"at {first_dx.admit_time}")

vocab = build_vocabulary(tables, cohorts)
print(f"\nvocabulary: {len(vocab)} features, first five: {vocab.entries[:5]}")
assert not any(e.startswith("322") for e in vocab.entries), "diagnosis codes must stay out"

dataset = encode_features(tables, cohorts, vocab)
print(f"encoded dataset: {dataset.n_samples} rows x {dataset.n_features} columns, "
      f"{dataset.features.nnz()} active cells "
      f"({dataset.features.nnz() / (dataset.n_samples * dataset.n_features):.2%} dense)")
print(f"positive rate: {dataset.positive_rate():.4f}")

# temporal purity: codes recorded at/after the first diagnosing admission
# never reach a case's feature row
row = dataset.features.row(dataset.sample_ids.index(example_case))
print(f"example case has {row.size} active features, all from pre-diagnosis admissions")
