"""Product-order posets over marker profiles and their average ranks.

A subject's *profile* is the tuple of its ordinal marker values, oriented so
that larger means frailer.  Subjects sharing a profile are treated as
mutually incomparable replicas, and the average rank (AR) of a profile is the
expected position (1 = least frail) of one of its replicas under a uniformly
random linear extension of that subject-level poset.

Three estimators are provided:

* :func:`exact_average_rank` -- dynamic programming over the down-sets of the
  replica poset; exact, for small cohorts.
* :func:`estimate_average_rank` with ``method="montecarlo"`` -- a collapsed
  Gibbs sampler on continuous positions (see :func:`_gibbs_average_rank`).
* :func:`estimate_average_rank` with ``method="lpom"`` -- a closed-form,
  weight-aware local partial order approximation.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

IntArray = npt.NDArray[np.int64]
FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]


class Relation(enum.Enum):
    LESS = "less"
    GREATER = "greater"
    EQUAL = "equal"
    INCOMPARABLE = "incomparable"


class Method(str, enum.Enum):
    EXACT = "exact"
    MONTE_CARLO = "montecarlo"
    LPOM = "lpom"


class PosetSizeError(ValueError):
    """Raised when exact enumeration is requested on too large a cohort."""


def compare_profiles(p: Sequence[int], q: Sequence[int]) -> Relation:
    """Compare two profiles in the componentwise (product) order."""
    a = np.asarray(p)
    b = np.asarray(q)
    if a.shape != b.shape:
        raise ValueError(f"profile schema mismatch: {a.shape} vs {b.shape}")
    le = bool(np.all(a <= b))
    ge = bool(np.all(a >= b))
    if le and ge:
        return Relation.EQUAL
    if le:
        return Relation.LESS
    if ge:
        return Relation.GREATER
    return Relation.INCOMPARABLE


def dominance_matrix(profiles: npt.ArrayLike, chunk: int = 512) -> BoolArray:
    """``below[i, j]`` is True iff profile ``i`` is strictly dominated by ``j``.

    Rows are assumed distinct.
    """
    P = np.asarray(profiles)
    k = P.shape[0]
    below = np.zeros((k, k), dtype=bool)
    for start in range(0, k, chunk):
        block = P[start:start + chunk]
        below[start:start + chunk] = np.all(block[:, None, :] <= P[None, :, :], axis=2)
    np.fill_diagonal(below, False)
    return below


@dataclass(frozen=True, eq=False)
class ProfilePoset:
    """Distinct observed profiles with subject counts and strict dominance.

    Attributes:
        profiles: ``(K, m)`` distinct profiles in lexicographic order.
        weights: ``(K,)`` number of subjects holding each profile.
        below: ``(K, K)`` strict dominance, ``below[i, j]`` iff ``i < j``.
        subject_profile: ``(N,)`` profile index of every subject, in input order.
        marker_names: column names of the profile schema.
    """

    profiles: IntArray
    weights: IntArray
    below: BoolArray
    subject_profile: IntArray
    marker_names: tuple[str, ...]

    @property
    def n_profiles(self) -> int:
        return int(self.profiles.shape[0])

    @property
    def n_subjects(self) -> int:
        return int(self.weights.sum())

    def weight_below(self) -> IntArray:
        return self.weights @ self.below.astype(np.int64)

    def weight_above(self) -> IntArray:
        return self.below.astype(np.int64) @ self.weights

    def covers(self) -> BoolArray:
        """Cover (Hasse) relation: ``i < j`` with nothing strictly in between."""
        b = self.below.astype(np.float32)
        two_step = (b @ b) > 0
        return self.below & ~two_step

    def cover_edges(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.covers())
        return list(zip(rows.tolist(), cols.tolist()))

    def heights(self) -> IntArray:
        """Length of the longest chain ending at each profile (minimal = 0)."""
        cov = self.covers()
        order = np.argsort(self.profiles.sum(axis=1), kind="stable")
        h = np.zeros(self.n_profiles, dtype=np.int64)
        for j in order:
            lower = np.flatnonzero(cov[:, j])
            if lower.size:
                h[j] = h[lower].max() + 1
        return h


def build_poset(
    profiles: npt.ArrayLike,
    marker_names: Sequence[str] | None = None,
) -> ProfilePoset:
    """Collapse per-subject profiles into a weighted poset of distinct profiles."""
    P = np.asarray(profiles, dtype=np.int64)
    if P.ndim != 2 or P.shape[0] == 0:
        raise ValueError("build_poset needs a non-empty (subjects x markers) matrix")
    uniq, inverse, counts = np.unique(P, axis=0, return_inverse=True, return_counts=True)
    names = tuple(marker_names) if marker_names is not None else tuple(
        f"m{i}" for i in range(P.shape[1])
    )
    if len(names) != P.shape[1]:
        raise ValueError("marker_names length does not match profile width")
    logger.info("poset: %d subjects, %d distinct profiles", P.shape[0], uniq.shape[0])
    return ProfilePoset(
        profiles=uniq,
        weights=counts.astype(np.int64),
        below=dominance_matrix(uniq),
        subject_profile=inverse.reshape(-1).astype(np.int64),
        marker_names=names,
    )


def poset_from_relation(weights: Sequence[int], below: npt.ArrayLike) -> ProfilePoset:
    """Build a poset from an explicit strict order (must be transitive).

    Useful for abstract posets that are not given as marker profiles; the
    profile matrix is left empty.
    """
    w = np.asarray(weights, dtype=np.int64)
    b = np.asarray(below, dtype=bool).copy()
    np.fill_diagonal(b, False)
    closure = (b.astype(np.float32) @ b.astype(np.float32)) > 0
    if np.any(closure & ~b):
        raise ValueError("relation is not transitive")
    if np.any(b & b.T):
        raise ValueError("relation is not antisymmetric")
    return ProfilePoset(
        profiles=np.zeros((w.size, 0), dtype=np.int64),
        weights=w,
        below=b,
        subject_profile=np.repeat(np.arange(w.size), w),
        marker_names=(),
    )


@dataclass(frozen=True)
class ARResult:
    """Per-profile average ranks and their normalisation to ``[0, 1]``."""

    average_rank: FloatArray
    fi: FloatArray
    method: Method
    n_subjects: int
    mc_samples: int | None = None
    mc_standard_error: FloatArray | None = None


def normalize_average_rank(average_rank: npt.ArrayLike, n_subjects: int) -> FloatArray:
    ar = np.asarray(average_rank, dtype=float)
    if n_subjects <= 1:
        return np.zeros_like(ar)
    return np.clip((ar - 1.0) / (n_subjects - 1.0), 0.0, 1.0)


def _result(ar: FloatArray, method: Method, n: int, **kw) -> ARResult:
    return ARResult(ar, normalize_average_rank(ar, n), method, n, **kw)


# --------------------------------------------------------------------------
# exact


def exact_average_rank_fractions(poset: ProfilePoset) -> list[Fraction]:
    """Exact AR as fractions; no size guard.

    States are count vectors ``k`` (how many replicas of each profile sit in
    a prefix of the extension).  ``F[k]`` counts labelled orderings of such a
    prefix, ``G[k]`` labelled orderings of the remaining suffix; a replica of
    ``p`` is placed at position ``|k| + 1`` in ``F[k] * (w_p - k_p) * G[k + e_p]``
    extensions.
    """
    w = [int(x) for x in poset.weights]
    K = len(w)
    lower = [np.flatnonzero(poset.below[:, p]).tolist() for p in range(K)]

    def addable(state: tuple[int, ...]) -> list[int]:
        return [
            p for p in range(K)
            if state[p] < w[p] and all(state[q] == w[q] for q in lower[p])
        ]

    zero = (0,) * K
    levels: list[dict[tuple[int, ...], int]] = [{zero: 1}]
    for _ in range(sum(w)):
        nxt: dict[tuple[int, ...], int] = {}
        for state, f in levels[-1].items():
            for p in addable(state):
                s = list(state)
                s[p] += 1
                key = tuple(s)
                nxt[key] = nxt.get(key, 0) + f * (w[p] - state[p])
        levels.append(nxt)

    G: dict[tuple[int, ...], int] = {tuple(w): 1}
    for level in reversed(levels[:-1]):
        for state in level:
            total = 0
            for p in addable(state):
                s = list(state)
                s[p] += 1
                total += (w[p] - state[p]) * G[tuple(s)]
            G[state] = total

    total_ext = G[zero]
    sums = [0] * K
    for depth, level in enumerate(levels[:-1]):
        for state, f in level.items():
            for p in addable(state):
                s = list(state)
                s[p] += 1
                sums[p] += f * (w[p] - state[p]) * G[tuple(s)] * (depth + 1)
    return [Fraction(sums[p], w[p] * total_ext) for p in range(K)]


def exact_average_rank(poset: ProfilePoset, max_subjects: int = 10) -> ARResult:
    """Exact expected ranks under uniformly random linear extensions."""
    n = poset.n_subjects
    if n > max_subjects:
        raise PosetSizeError(
            f"exact enumeration capped at {max_subjects} subjects, got {n}"
        )
    ar = np.array([float(x) for x in exact_average_rank_fractions(poset)])
    return _result(ar, Method.EXACT, n)


# --------------------------------------------------------------------------
# LPOM


def lpom_average_rank(poset: ProfilePoset) -> FloatArray:
    """Weighted local partial order model.

    With ``B`` subjects strictly below, ``A`` strictly above and ``w`` replicas
    of the profile itself::

        AR = (N + 1) * (B + (w + 1) / 2) / (B + A + w + 1)

    Equivalently ``B + (w+1)/2`` plus the ``I = N - B - A - w`` incomparable
    subjects scaled by that same ratio.  Exact on chains and antichains and
    strictly order-preserving.  With unit weights it reduces to the classical
    LPOM0 formula ``(S + 1)(n + 1) / (n + 1 - U)``.
    """
    w = poset.weights.astype(float)
    B = poset.weight_below().astype(float)
    A = poset.weight_above().astype(float)
    n = float(poset.n_subjects)
    return (n + 1.0) * (B + (w + 1.0) / 2.0) / (B + A + w + 1.0)


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass(frozen=True)
class _Level:
    members: IntArray
    weights: FloatArray
    lower: IntArray  # padded with the sentinel column K
    upper: IntArray


def _levels(poset: ProfilePoset) -> list[_Level]:
    K = poset.n_profiles
    cov = poset.covers()
    h = poset.heights()
    out = []
    for lev in range(int(h.max()) + 1 if K else 0):
        members = np.flatnonzero(h == lev)
        lows = [np.flatnonzero(cov[:, j]) for j in members]
        ups = [np.flatnonzero(cov[j, :]) for j in members]
        dl = max(1, max(len(x) for x in lows))
        du = max(1, max(len(x) for x in ups))
        lo = np.full((members.size, dl), K, dtype=np.int64)
        up = np.full((members.size, du), K, dtype=np.int64)
        for r, (a, b) in enumerate(zip(lows, ups)):
            lo[r, : a.size] = a
            up[r, : b.size] = b
        out.append(_Level(members, poset.weights[members].astype(float), lo, up))
    return out


def _sweep(levels, mins, maxs, rng, eff_weights):
    """One block-Gibbs sweep over all profiles, one antichain at a time.

    Given its neighbours, the replicas of a profile are i.i.d. uniform on
    ``(L, R)`` (``L`` = largest position below it, ``R`` = smallest above), so
    only the min and max of the block need to be drawn.
    """
    C = mins.shape[0]
    for lev in levels:
        m = lev.members
        w = eff_weights[m]
        L = maxs[:, lev.lower].max(axis=2)
        R = mins[:, lev.upper].min(axis=2)
        width = R - L
        u1 = rng.random((C, m.size))
        u2 = rng.random((C, m.size))
        lo = L - width * np.expm1(np.log(u1) / w)
        single = w <= 1.0
        expo = np.where(single, 1.0, w - 1.0)
        hi = R + (R - lo) * np.expm1(np.log(u2) / expo)
        hi = np.where(single, lo, hi)
        mins[:, m] = lo
        maxs[:, m] = hi


def _rank_estimates(mins: FloatArray, maxs: FloatArray, w: FloatArray) -> FloatArray:
    """Rao-Blackwellised AR estimate for every chain, shape ``(C, K)``.

    Conditional on block extremes, the interior replicas of each profile are
    i.i.d. uniform between its min and max, independently across profiles.
    So the expected number of subjects below a point ``t`` is a piecewise
    linear function ``G(t)`` with unit steps at every block extreme and a ramp
    of total mass ``w - 2`` across each block.  A randomly chosen replica of
    ``p`` is its min or max with probability ``1/w`` each, otherwise uniform on
    the block, so ``E[G(X_p)]`` needs ``G`` at the extremes and the integral of
    ``G`` over the block.  The profile's own contribution is removed and the
    exchangeable share ``(w - 1) / 2`` of its own replicas added back.
    """
    C, K = mins.shape
    single = w <= 1.0
    span = np.maximum(maxs - mins, 1e-300)
    dens = np.where(single, 0.0, (w - 2.0)) / span  # ramp slope per block
    # two breakpoints per profile; for single replicas the max entry is inert
    pos = np.concatenate([mins, maxs], axis=1)
    m_step = np.concatenate(
        [np.ones((C, K)), np.broadcast_to(np.where(single, 0.0, 1.0), (C, K))], axis=1
    )
    slope = np.concatenate([dens, -dens], axis=1)

    order = np.argsort(pos, axis=1, kind="stable")
    c = np.take_along_axis(pos, order, axis=1)
    m = np.take_along_axis(m_step, order, axis=1)
    s = np.take_along_axis(slope, order, axis=1)

    def excl_cumsum(x):
        out = np.cumsum(x, axis=1)
        out -= x
        return out

    Sm = excl_cumsum(m)
    Smc = excl_cumsum(m * c)
    Ss = excl_cumsum(s)
    Ssc = excl_cumsum(s * c)
    Ssc2 = excl_cumsum(s * c * c)
    G_sorted = Sm + c * Ss - Ssc
    H_sorted = c * Sm - Smc + 0.5 * c * c * Ss - c * Ssc + 0.5 * Ssc2

    G = np.empty_like(G_sorted)
    H = np.empty_like(H_sorted)
    np.put_along_axis(G, order, G_sorted, axis=1)
    np.put_along_axis(H, order, H_sorted, axis=1)
    G_min, G_max = G[:, :K], G[:, K:]
    H_min, H_max = H[:, :K], H[:, K:]

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_interior = (H_max - H_min) / span
    multi = np.where(
        w >= 2.0,
        (G_min + G_max) / w + (w - 2.0) / w * np.nan_to_num(mean_interior),
        0.0,
    )
    expect_g = np.where(single, G_min, multi)
    own = np.where(single, 0.0, (w - 1.0) / w + (w - 2.0) / 2.0)
    return 1.0 + (w - 1.0) / 2.0 + expect_g - own


def _initial_state(levels, K, C, rng):
    # a random linear extension of the profile poset, ordered by height
    key = np.empty((C, K))
    for h, lev in enumerate(levels):
        key[:, lev.members] = h + 0.999 * rng.random((C, lev.members.size))
    rank = np.argsort(np.argsort(key, axis=1), axis=1)
    pos = (rank + 0.5) / K
    mins = np.empty((C, K + 1))
    maxs = np.empty((C, K + 1))
    mins[:, :K] = pos
    maxs[:, :K] = pos
    mins[:, K] = 1.0  # sentinel: upper bound for profiles with no upper cover
    maxs[:, K] = 0.0  # sentinel: lower bound for profiles with no lower cover
    return mins, maxs


def _gibbs_average_rank(
    poset: ProfilePoset,
    n_samples: int,
    seed: int,
    n_chains: int | None = None,
    burn_in: int | None = None,
    thin: int = 1,
    anneal_sweeps: int = 20,
) -> tuple[FloatArray, FloatArray, int]:
    """Average ranks from a collapsed Gibbs sampler on continuous positions.

    Uniform linear extensions of the replica poset are the orderings of i.i.d.
    uniform positions conditioned on respecting the order.  The chain state
    keeps only the min and max position of each profile's replicas; each sweep
    redraws them block by block from their exact conditional.

    ``n_samples`` draws are split over ``n_chains`` independent chains run in
    lock-step; the standard error comes from the spread of per-chain means.

    Heavy profiles make block boundaries move in steps of order ``1/w``, so
    when weights are large the chain first runs on geometrically shrunken
    weights and doubles them stage by stage up to the real ones.
    """
    K = poset.n_profiles
    w = poset.weights.astype(float)
    if n_chains is None:
        n_chains = 2_000 if K <= 64 else 1_000
    if burn_in is None:
        burn_in = 50 if K <= 64 else 100
    C = max(1, min(n_chains, n_samples))
    draws = math.ceil(n_samples / C)
    comparable = poset.below | poset.below.T
    np.fill_diagonal(comparable, True)
    if comparable.all() or not poset.below.any():
        # chain or antichain: LPOM is exact and there is nothing to sample
        return lpom_average_rank(poset), np.zeros(K), C * draws
    rng = np.random.default_rng(seed)
    levels = _levels(poset)
    mins, maxs = _initial_state(levels, K, C, rng)

    w_max = float(w.max())
    stages = max(0, math.ceil(math.log2(w_max / 8.0))) if w_max > 8 else 0
    for stage in range(stages, 0, -1):
        eff = np.maximum(1.0, np.round(w / 2.0 ** stage))
        for _ in range(anneal_sweeps):
            _sweep(levels, mins, maxs, rng, eff)
    for _ in range(burn_in):
        _sweep(levels, mins, maxs, rng, w)

    acc = np.zeros((C, K))
    for d in range(draws):
        for _ in range(thin):
            _sweep(levels, mins, maxs, rng, w)
        acc += _rank_estimates(mins[:, :K], maxs[:, :K], w)
    chain_means = acc / draws
    ar = chain_means.mean(axis=0)
    if C > 1:
        se = chain_means.std(axis=0, ddof=1) / math.sqrt(C)
    else:
        se = np.full(K, np.nan)
    return ar, se, C * draws


def estimate_average_rank(
    poset: ProfilePoset,
    method: Method | str = Method.MONTE_CARLO,
    n_samples: int = 10_000,
    seed: int = 0,
    **sampler_options,
) -> ARResult:
    """Approximate average ranks for population-scale posets."""
    method = Method(method)
    n = poset.n_subjects
    if method is Method.LPOM:
        return _result(lpom_average_rank(poset), Method.LPOM, n)
    if method is Method.EXACT:
        return exact_average_rank(poset, **sampler_options)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    ar, se, used = _gibbs_average_rank(poset, n_samples, seed, **sampler_options)
    return _result(ar, Method.MONTE_CARLO, n, mc_samples=used, mc_standard_error=se)


def average_rank(
    poset: ProfilePoset,
    method: Method | str = Method.MONTE_CARLO,
    *,
    n_samples: int = 10_000,
    seed: int = 0,
    exact_cap: int = 10,
) -> ARResult:
    """Dispatch on ``method``."""
    method = Method(method)
    if method is Method.EXACT:
        return exact_average_rank(poset, max_subjects=exact_cap)
    return estimate_average_rank(poset, method, n_samples=n_samples, seed=seed)


def assign_normalized_fi(poset: ProfilePoset, ar: ARResult) -> FloatArray:
    """Per-subject frailty index, in the subject order given to :func:`build_poset`."""
    if poset.n_subjects == 1:
        warnings.warn("single-subject cohort: FI defined as 0", stacklevel=2)
        return np.zeros(1)
    return ar.fi[poset.subject_profile]
