"""Code-list matching and marker extraction.

Marker definitions live in a TOML file (see ``data/table_s1.toml``).  Every
marker is oriented so that a higher level means a frailer subject; the loader
rejects anything else.
"""

from __future__ import annotations

import enum
import functools
import logging
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import Code, CodeSystem, Cohort, Flow, FlowRecord, Subject

try:  # pragma: no cover - depends on interpreter version
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

logger = logging.getLogger(__name__)


class MatchKind(str, enum.Enum):
    EXACT = "exact"
    PREFIX = "prefix"
    RANGE = "range"
    ANY = "any"  # any record of the flow, codes ignored


class MarkerKind(str, enum.Enum):
    DICHOTOMOUS = "dichotomous"
    ORDINAL_COUNT = "ordinal_count"
    ORDINAL_AGE = "ordinal_age"


class DefinitionError(ValueError):
    """Invalid marker or pattern definition."""


def normalize_code(code: str) -> str:
    """Upper-case and drop dots and blanks, so ``'294.1'`` == ``'2941'``."""
    return re.sub(r"[.\s]", "", code).upper()


def _shape(s: str) -> str:
    return "".join("9" if ch.isdigit() else "A" for ch in s)


_logged_nonnumeric: set[tuple[str, str]] = set()


@dataclass(frozen=True)
class CodePattern:
    """One rule of a code list.

    ``values`` holds codes (``EXACT``) or prefixes (``PREFIX``).  ``ranges``
    holds ``(lo, hi)`` bounds compared on the leading ``len(lo)`` characters
    of the code, so ``("140", "208")`` works on the 3-digit ICD-9 category and
    ``("2500", "2503")`` on the 4-digit subcategory.  Range bounds may carry a
    letter prefix (``("F06", "F99")``); a code whose leading characters do not
    have the same letter/digit shape as the bounds never matches.

    Position constraints apply to diagnosis codes: a code matches only at
    positions in ``[min_position, max_position]``; codes listed in ``exclude``
    (prefix semantics) never match at positions ``>= exclude_min_position``.
    ``with_diagnosis`` adds a conjunction: the record must also carry an
    ICD-9 code starting with one of those prefixes (a missing diagnosis means
    no match).  ``attributes`` must all be present with the given values.
    """

    flow: Flow
    system: CodeSystem | None = None
    match: MatchKind = MatchKind.EXACT
    values: tuple[str, ...] = ()
    ranges: tuple[tuple[str, str], ...] = ()
    min_position: int = 0
    max_position: int | None = None
    exclude: tuple[str, ...] = ()
    exclude_min_position: int = 0
    with_diagnosis: tuple[str, ...] = ()
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(normalize_code(v) for v in self.values))
        object.__setattr__(
            self, "ranges", tuple((normalize_code(a), normalize_code(b)) for a, b in self.ranges)
        )
        object.__setattr__(self, "exclude", tuple(normalize_code(v) for v in self.exclude))
        object.__setattr__(
            self, "with_diagnosis", tuple(normalize_code(v) for v in self.with_diagnosis)
        )
        if self.match is MatchKind.ANY:
            return
        if self.system is None:
            raise DefinitionError("code system required unless match = 'any'")
        if self.match is MatchKind.RANGE:
            if not self.ranges:
                raise DefinitionError("range pattern without ranges")
            for lo, hi in self.ranges:
                if len(lo) != len(hi) or _shape(lo) != _shape(hi):
                    raise DefinitionError(f"range bounds {lo!r}, {hi!r} differ in shape")
                if lo > hi:
                    raise DefinitionError(f"range lo {lo!r} > hi {hi!r}")
        else:
            if not self.values or any(not v for v in self.values):
                raise DefinitionError(f"{self.match.value} pattern needs non-empty values")
        if self.max_position is not None and self.max_position < self.min_position:
            raise DefinitionError("max_position < min_position")

    def code_matches(self, code: str) -> bool:
        """Code-level test, ignoring position and system."""
        return _code_matches(self, normalize_code(code))

    def matches_code(self, c: Code) -> bool:
        if self.system is not None and c.system is not self.system:
            return False
        if c.position < self.min_position:
            return False
        if self.max_position is not None and c.position > self.max_position:
            return False
        norm = normalize_code(c.code)
        if not _code_matches(self, norm):
            return False
        if c.position >= self.exclude_min_position and any(norm.startswith(e) for e in self.exclude):
            return False
        return True


@functools.lru_cache(maxsize=1 << 16)
def _code_matches(pattern: CodePattern, norm: str) -> bool:
    if pattern.match is MatchKind.EXACT:
        return norm in pattern.values
    if pattern.match is MatchKind.PREFIX:
        return any(norm.startswith(v) for v in pattern.values)
    for lo, hi in pattern.ranges:
        head = norm[: len(lo)]
        if len(head) < len(lo) or _shape(head) != _shape(lo):
            key = (norm, lo)
            if key not in _logged_nonnumeric:
                _logged_nonnumeric.add(key)
                logger.debug("code %r not comparable with range bound %r", norm, lo)
            continue
        if lo <= head <= hi:
            return True
    return False


def match_code(record: FlowRecord, pattern: CodePattern) -> bool:
    """True iff ``record`` satisfies ``pattern``."""
    if record.flow is not pattern.flow:
        return False
    for k, v in pattern.attributes:
        if record.attr(k) != v:
            return False
    if pattern.with_diagnosis:
        dx = [normalize_code(c.code) for c in record.codes if c.system is CodeSystem.ICD9CM]
        if not any(d.startswith(p) for d in dx for p in pattern.with_diagnosis):
            return False
    if pattern.match is MatchKind.ANY:
        return True
    return any(pattern.matches_code(c) for c in record.codes)


def example_record(pattern: CodePattern, subject: str, date, position: int | None = None) -> FlowRecord:
    """Build a minimal record that satisfies ``pattern`` (used by the generator)."""
    codes: list[Code] = []
    if pattern.match is not MatchKind.ANY:
        if pattern.match is MatchKind.RANGE:
            code = pattern.ranges[0][0]
        else:
            code = pattern.values[0]
        pos = pattern.min_position if position is None else max(position, pattern.min_position)
        if pattern.system is CodeSystem.EXEMPTION:
            pos = 0
        codes.append(Code(pattern.system, code, pos))
        for p in range(pos):
            # fill lower positions with a neutral code
            codes.insert(p, Code(pattern.system, "V7010", p))
    elif pattern.flow is Flow.HOME_CARE:
        codes.append(Code(CodeSystem.SERVICE, "ADI", 0))
    if pattern.with_diagnosis:
        codes.append(Code(CodeSystem.ICD9CM, pattern.with_diagnosis[0], len(codes)))
    attrs = dict(pattern.attributes)
    if pattern.flow is Flow.HOSPITAL_DISCHARGE:
        attrs.setdefault("duration", "3")
    if pattern.flow is Flow.ER_ADMISSION:
        attrs.setdefault("priority", "green")
    if pattern.flow is Flow.HOME_CARE:
        attrs.setdefault("n_services", "1")
    return FlowRecord(subject, pattern.flow, date, tuple(codes), tuple(sorted(attrs.items())))


@dataclass(frozen=True)
class MarkerDefinition:
    """A marker: its kind, ordered levels and the code patterns that trigger it.

    Ordinal levels are given by ``cuts``, the smallest raw value of each level
    above the first: ``cuts = (1, 3)`` gives ``0 | 1-2 | 3+``.  For count
    markers, ``count_source`` lists the flows whose baseline records are
    counted (restricted to ``patterns`` when any are given).
    """

    name: str
    kind: MarkerKind
    levels: tuple[str, ...] = ("absent", "present")
    patterns: tuple[CodePattern, ...] = ()
    cuts: tuple[int, ...] = ()
    count_source: tuple[Flow, ...] = ()
    description: str = ""

    def __post_init__(self):
        if not self.name:
            raise DefinitionError("marker without a name")
        if len(set(self.levels)) != len(self.levels):
            raise DefinitionError(f"{self.name}: duplicate level labels")
        if self.kind is MarkerKind.DICHOTOMOUS:
            if len(self.levels) != 2:
                raise DefinitionError(f"{self.name}: dichotomous marker needs exactly 2 levels")
            if self.cuts:
                raise DefinitionError(f"{self.name}: dichotomous marker takes no cuts")
            if not self.patterns:
                raise DefinitionError(f"{self.name}: dichotomous marker without patterns")
        else:
            if len(self.levels) < 1 or len(self.cuts) != len(self.levels) - 1:
                raise DefinitionError(f"{self.name}: need len(levels) - 1 cut points")
            if any(b <= a for a, b in zip(self.cuts, self.cuts[1:])):
                raise DefinitionError(f"{self.name}: cut points must be strictly increasing")
            if self.kind is MarkerKind.ORDINAL_COUNT:
                if not self.count_source:
                    raise DefinitionError(f"{self.name}: count marker without count_source")
                if self.cuts and self.cuts[0] < 1:
                    raise DefinitionError(f"{self.name}: level 0 unreachable (first cut < 1)")

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level_of(self, raw: int) -> int:
        if self.kind is MarkerKind.DICHOTOMOUS:
            return int(raw > 0)
        return int(np.searchsorted(self.cuts, raw, side="right"))

    def with_cuts(self, cuts: Sequence[int]) -> "MarkerDefinition":
        cuts = tuple(int(c) for c in cuts)
        levels = _count_labels(cuts)
        return MarkerDefinition(
            self.name, self.kind, levels, self.patterns, cuts, self.count_source, self.description
        )


def _count_labels(cuts: Sequence[int]) -> tuple[str, ...]:
    bounds = [0, *cuts]
    out = []
    for i, lo in enumerate(bounds):
        if i + 1 < len(bounds):
            hi = bounds[i + 1] - 1
            out.append(str(lo) if hi == lo else f"{lo}-{hi}")
        else:
            out.append(f"{lo}+")
    return tuple(out)


@dataclass(frozen=True)
class Profile:
    values: tuple[int, ...]
    marker_names: tuple[str, ...]
    n_levels: tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if len(self.values) != len(self.marker_names):
            raise ValueError("profile length does not match its schema")
        if self.n_levels:
            for v, k, name in zip(self.values, self.n_levels, self.marker_names):
                if not 0 <= v < k:
                    raise ValueError(f"{name}: level {v} outside [0, {k})")

    def as_dict(self) -> dict[str, int]:
        return dict(zip(self.marker_names, self.values))


# --------------------------------------------------------------------------
# config loading


def _parse_pattern(obj: Mapping) -> list[CodePattern]:
    flows = obj.get("flows") or [obj["flow"]]
    system = obj.get("system")
    match = MatchKind(obj.get("match", "exact"))
    out = []
    for f in flows:
        out.append(
            CodePattern(
                flow=Flow(f),
                system=CodeSystem(system) if system else None,
                match=match,
                values=tuple(obj.get("values", ())),
                ranges=tuple(tuple(r) for r in obj.get("ranges", ())),
                min_position=int(obj.get("min_position", 0)),
                max_position=obj.get("max_position"),
                exclude=tuple(obj.get("exclude", ())),
                exclude_min_position=int(obj.get("exclude_min_position", 0)),
                with_diagnosis=tuple(obj.get("with_diagnosis", ())),
                attributes=tuple(sorted((obj.get("attributes") or {}).items())),
            )
        )
    return out


def parse_marker(obj: Mapping) -> MarkerDefinition:
    orientation = obj.get("orientation", "higher_is_frailer")
    if orientation != "higher_is_frailer":
        raise DefinitionError(
            f"{obj.get('name')}: orientation must be 'higher_is_frailer', got {orientation!r}"
        )
    kind = MarkerKind(obj["kind"])
    patterns = tuple(p for raw in obj.get("pattern", ()) for p in _parse_pattern(raw))
    cuts = tuple(int(c) for c in obj.get("cuts", ()))
    levels = obj.get("levels")
    if levels is None:
        levels = ("absent", "present") if kind is MarkerKind.DICHOTOMOUS else _count_labels(cuts)
    return MarkerDefinition(
        name=obj["name"],
        kind=kind,
        levels=tuple(levels),
        patterns=patterns,
        cuts=cuts,
        count_source=tuple(Flow(f) for f in obj.get("count_source", ())),
        description=obj.get("description", ""),
    )


def parse_markers(doc: Mapping) -> list[MarkerDefinition]:
    defs = [parse_marker(m) for m in doc.get("marker", ())]
    names = [d.name for d in defs]
    dup = [n for n, c in Counter(names).items() if c > 1]
    if dup:
        raise DefinitionError(f"duplicate marker names: {dup}")
    return defs


def load_markers(path: str | Path | None = None) -> list[MarkerDefinition]:
    """Load marker definitions; ``None`` loads the shipped eight-marker set."""
    if path is None:
        text = resources.files("frailty.data").joinpath("table_s1.toml").read_text("utf-8")
    elif str(path) in BUILTIN_MARKER_SETS:
        text = resources.files("frailty.data").joinpath(BUILTIN_MARKER_SETS[str(path)]).read_text("utf-8")
    else:
        text = Path(path).read_text("utf-8")
    return parse_markers(tomllib.loads(text))


BUILTIN_MARKER_SETS = {"table_s1": "table_s1.toml", "extended": "markers_extended.toml"}


# --------------------------------------------------------------------------
# extraction


def _raw_value(subject: Subject, d: MarkerDefinition, records: Sequence[FlowRecord]) -> int:
    if d.kind is MarkerKind.ORDINAL_AGE:
        return subject.age_years
    if d.kind is MarkerKind.ORDINAL_COUNT:
        n = 0
        for r in records:
            if r.flow in d.count_source:
                if not d.patterns or any(match_code(r, p) for p in d.patterns):
                    n += 1
        return n
    return int(any(match_code(r, p) for r in records for p in d.patterns))


def extract_markers(
    subject: Subject, definitions: Sequence[MarkerDefinition]
) -> tuple[Profile, dict[str, int]]:
    """Profile of one subject from its baseline records, plus raw counts of count markers."""
    values = []
    raw_counts = {}
    for d in definitions:
        raw = _raw_value(subject, d, subject.baseline_records)
        if d.kind is MarkerKind.ORDINAL_COUNT:
            raw_counts[d.name] = raw
        values.append(d.level_of(raw))
    names = tuple(d.name for d in definitions)
    return Profile(tuple(values), names, tuple(d.n_levels for d in definitions)), raw_counts


@dataclass
class MarkerTable:
    """Marker levels for a whole cohort (rows follow the cohort's subject order)."""

    subject_ids: list[str]
    names: list[str]
    values: np.ndarray  # (n_subjects, n_markers), small ints
    raw_counts: dict[str, np.ndarray]
    n_levels: list[int]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.values[:, idx]

    def prevalence(self) -> dict[str, float]:
        if not self.subject_ids:
            return {n: 0.0 for n in self.names}
        return {n: float((self.values[:, j] > 0).mean()) for j, n in enumerate(self.names)}


def extract_cohort_markers(cohort: Cohort, definitions: Sequence[MarkerDefinition]) -> MarkerTable:
    n = len(cohort)
    values = np.zeros((n, len(definitions)), dtype=np.int16)
    counts = {d.name: np.zeros(n, dtype=np.int64) for d in definitions
              if d.kind is MarkerKind.ORDINAL_COUNT}
    # index patterns by flow so each record is only tested against relevant markers
    by_flow: dict[Flow, list[tuple[int, CodePattern]]] = {}
    for j, d in enumerate(definitions):
        if d.kind is MarkerKind.DICHOTOMOUS:
            for p in d.patterns:
                by_flow.setdefault(p.flow, []).append((j, p))
    age_cols = [j for j, d in enumerate(definitions) if d.kind is MarkerKind.ORDINAL_AGE]
    count_cols = [j for j, d in enumerate(definitions) if d.kind is MarkerKind.ORDINAL_COUNT]
    # identical records (same flow, codes, attributes) are matched once
    memo: dict[tuple, tuple[int, ...]] = {}
    for i, s in enumerate(cohort.subjects):
        hit: set[int] = set()
        for r in s.baseline_records:
            key = (r.flow, r.codes, r.attributes)
            found = memo.get(key)
            if found is None:
                found = tuple(sorted({j for j, p in by_flow.get(r.flow, ()) if match_code(r, p)}))
                memo[key] = found
            hit.update(found)
        for j in hit:
            values[i, j] = 1
        for j in age_cols:
            values[i, j] = definitions[j].level_of(s.age_years)
        for j in count_cols:
            d = definitions[j]
            raw = _raw_value(s, d, s.baseline_records)
            counts[d.name][i] = raw
            values[i, j] = d.level_of(raw)
    return MarkerTable(
        subject_ids=cohort.ids,
        names=[d.name for d in definitions],
        values=values,
        raw_counts=counts,
        n_levels=[d.n_levels for d in definitions],
    )


# --------------------------------------------------------------------------
# supervised discretization


def _best_split(x_vals: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    """Best Gini split over sorted distinct values with per-value class counts.

    Returns ``(threshold, left_mask_over_values)`` or ``None`` when the node is
    pure or has a single distinct value.
    """
    if len(x_vals) < 2:
        return None
    P, N = pos.sum(), neg.sum()
    if P == 0 or N == 0:
        return None
    lp = np.cumsum(pos)[:-1].astype(float)
    ln = np.cumsum(neg)[:-1].astype(float)
    rp, rn = P - lp, N - ln
    nl, nr = lp + ln, rp + rn
    gini_l = 1.0 - (lp / nl) ** 2 - (ln / nl) ** 2
    gini_r = 1.0 - (rp / nr) ** 2 - (rn / nr) ** 2
    impurity = nl * gini_l + nr * gini_r
    k = int(np.argmin(impurity))  # first (smallest threshold) among ties
    thr = (x_vals[k] + x_vals[k + 1]) / 2.0
    return thr, k + 1


def gini_tree_thresholds(x: np.ndarray, y: np.ndarray, depth: int = 2) -> list[float]:
    """Thresholds of a depth-limited Gini classification tree on one variable.

    Every impure node with at least two distinct values is split, as in a
    CART tree with no minimum impurity decrease.
    """
    x = np.asarray(x)
    y = np.asarray(y).astype(bool)
    vals, inv = np.unique(x, return_inverse=True)
    pos = np.bincount(inv, weights=y, minlength=len(vals))
    neg = np.bincount(inv, weights=~y, minlength=len(vals))
    out: list[float] = []

    def grow(lo: int, hi: int, d: int):
        if d == 0:
            return
        split = _best_split(vals[lo:hi], pos[lo:hi], neg[lo:hi])
        if split is None:
            return
        thr, k = split
        out.append(float(thr))
        grow(lo, lo + k, d - 1)
        grow(lo + k, hi, d - 1)

    grow(0, len(vals), depth)
    return out


def _outcome_columns(outcomes) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Outcome flags with their evaluation masks (onset outcomes exclude baseline cases)."""
    death = np.array([o.death for o in outcomes], bool)
    full = np.ones(len(death), bool)
    cols = {
        "death": (death, full),
        "er_red_code": (np.array([o.er_red_code for o in outcomes], bool), full),
        "hospitalisation": (np.array([o.hospitalisation for o in outcomes], bool), full),
        "disability_onset": (
            np.array([o.disability_onset for o in outcomes], bool),
            ~np.array([o.baseline_disability for o in outcomes], bool),
        ),
        "dementia_onset": (
            np.array([o.dementia_onset for o in outcomes], bool),
            ~np.array([o.baseline_dementia for o in outcomes], bool),
        ),
        "femur_fracture": (np.array([o.femur_fracture for o in outcomes], bool), full),
    }
    return cols


def discretize_counts(
    raw_counts: Sequence[int] | np.ndarray,
    outcomes,
    B: int = 10,
    seed: int = 0,
    fraction: float = 0.5,
    n_cuts: int = 2,
) -> list[float]:
    """Pooled modal thresholds of depth-2 Gini trees fitted on subsamples.

    For each of the six outcomes and each of ``B`` random subsamples (a
    ``fraction`` of the eligible subjects, drawn without replacement) a tree
    is fitted on the single count variable.  All split thresholds are pooled
    and the ``n_cuts`` most frequent are returned in increasing order (ties
    on frequency go to the smaller threshold).  ``outcomes`` is a sequence of
    :class:`~frailty.cohort.OutcomeVector` or a mapping from name to a flag
    array.  A constant count variable yields no thresholds.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    x = np.asarray(raw_counts)
    if len(np.unique(x)) < 2:
        warnings.warn("constant count variable: single category", stacklevel=2)
        return []
    if isinstance(outcomes, Mapping):
        cols = {k: (np.asarray(v, bool), np.ones(len(x), bool)) for k, v in outcomes.items()}
    else:
        cols = _outcome_columns(outcomes)
    rng = np.random.default_rng(seed)
    pooled: Counter[float] = Counter()
    used = 0
    for name, (y, mask) in cols.items():
        idx = np.flatnonzero(mask)
        if y[idx].all() or not y[idx].any():
            logger.warning("discretization: outcome %s has a single class, skipped", name)
            continue
        used += 1
        m = max(2, int(round(fraction * len(idx)))) if fraction < 1 else len(idx)
        for _ in range(B):
            sub = rng.choice(idx, size=min(m, len(idx)), replace=False) if m < len(idx) else idx
            pooled.update(gini_tree_thresholds(x[sub], y[sub]))
    if not used:
        raise ValueError("no outcome has both events and non-events")
    ranked = sorted(pooled.items(), key=lambda kv: (-kv[1], kv[0]))
    return sorted(t for t, _ in ranked[:n_cuts])


def thresholds_to_cuts(thresholds: Iterable[float]) -> tuple[int, ...]:
    """Integer cut points (smallest value of each upper level) from split thresholds."""
    return tuple(sorted({int(np.floor(t)) + 1 for t in thresholds}))
