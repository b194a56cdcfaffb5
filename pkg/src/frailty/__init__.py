"""Frailty index construction from administrative health records.

Markers are extracted from record flows, screened and selected against six
adverse outcomes, and each subject is scored by the normalised average rank
of its marker profile in the product-order poset of all observed profiles.
"""

from .cohort import Cohort, CohortSpec, Flow, FlowRecord, OutcomeVector, Subject
from .markers import MarkerDefinition, Profile, extract_markers, load_markers
from .poset import (
    ARResult,
    Method,
    ProfilePoset,
    build_poset,
    estimate_average_rank,
    exact_average_rank,
)
from .selection import auc, compute_fi, delong_ci, forward_select, mean_auc
from .synthetic import SyntheticSpec, generate_synthetic_cohort

__version__ = "0.1.0"

__all__ = [
    "ARResult", "Cohort", "CohortSpec", "Flow", "FlowRecord", "MarkerDefinition", "Method",
    "OutcomeVector", "Profile", "ProfilePoset", "Subject", "SyntheticSpec", "auc",
    "build_poset", "compute_fi", "delong_ci", "estimate_average_rank", "exact_average_rank",
    "extract_markers", "forward_select", "generate_synthetic_cohort", "load_markers", "mean_auc",
]
