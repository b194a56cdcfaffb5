"""Candidate screening on a synthetic cohort.

Prevalence filter, protective-association filter and the stepwise vote over
balanced case-control subsamples, in the order the pipeline applies them.
"""
from __future__ import annotations

from frailty.markers import extract_cohort_markers, load_markers
from frailty.screening import (
    OutcomeData,
    odds_ratio_matrix,
    prevalence_screen,
    protective_screen,
    stepwise_vote_select,
)
from frailty.synthetic import SyntheticSpec, generate_synthetic_cohort

cohort = generate_synthetic_cohort(SyntheticSpec(n_subjects=8000, seed=4))
table = extract_cohort_markers(cohort, load_markers("extended"))
outcomes = OutcomeData.from_cohort(cohort)
print(f"{len(cohort)} subjects, {len(table.names)} candidate markers, outcomes: {', '.join(outcomes.names)}")

step1 = prevalence_screen(table.values, table.names)
print("\nprevalence below 1%:", step1.dropped or "none")

orm = odds_ratio_matrix(table.select(step1.kept), step1.kept, outcomes)
step2 = protective_screen(orm)
print("protective on two or more outcomes:", step2.dropped or "none")
for name in step2.dropped:
    print(f"  {name:20s}", " ".join(f"{o.estimate:5.2f}" for o in orm[name]))

votes = stepwise_vote_select(table.select(step2.kept), step2.kept, outcomes, n_models=20, seed=4)
print(f"\nvotes out of {votes.n_models} balanced models per outcome:")
print(votes.votes.to_string())
print("\ncore set:", votes.core_set)
