from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from frailty.synthetic import SyntheticSpec, generate_synthetic_cohort

FIXTURES = Path(__file__).parent / "fixtures"


def load_ar_oracles() -> list[dict]:
    """Frozen brute-force average ranks (see fixtures/make_oracles.py)."""
    data = json.loads((FIXTURES / "ar_oracles.json").read_text())
    for fx in data:
        fx["ar"] = [Fraction(a) for a in fx["ar"]]
    return data


def subjects_of(fx: dict) -> np.ndarray:
    return np.repeat(np.array(fx["profiles"]), fx["weights"], axis=0)


def profile_index(poset, profiles) -> list[int]:
    rows = [tuple(r) for r in poset.profiles.tolist()]
    return [rows.index(tuple(p)) for p in profiles]


@pytest.fixture(scope="session")
def small_cohort():
    return generate_synthetic_cohort(SyntheticSpec(n_subjects=3000, seed=11))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
