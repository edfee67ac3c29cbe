"""Competing candidate post-processors and the selection-cost model.

`search_tree_select` is the exact-but-expensive reference: it enumerates
every N-subset of the M candidates (cost C(M,N), see `count_selections`),
scores each against a skeleton template, and returns the minimum-error
subset. The error of a y-sorted subset is

    sum_i (gap_i - template_gap_i)^2  +  lambda * sum_i (x_i - mean_x)^2

with lambda = 0.1. Ties resolve to the lexicographically smallest index
tuple over the y-sorted candidate order, so results are deterministic and
independent of any internal parallel partitioning.

The inner loop is JIT-compiled with numba when available (the appendix-size
benchmark needs ~1e8 subset evaluations per case); a pure-Python enumerator
with bit-identical arithmetic is the fallback and the small-case reference.

`condition_filter` is the greedy single-pass alternative: keep a candidate
iff its gap to the previously kept one lies in a tolerance band around the
template gaps and it stays near the running column mean. It never
backtracks, so a false positive above the first true disc can evict the
whole chain start -- the documented failure mode that motivates learned
refinement.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
import numpy as np

from .heatmap import LabelScheme, default_scheme
from .lookonce import CandidateSet, InfeasibleSelectionError, SelectionResult

LATERAL_PENALTY = 0.1

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


@dataclass(frozen=True)
class SkeletonTemplate:
    """Expected disc y-positions (superior to inferior) and the tolerance
    band used by the condition filter."""

    ys_mm: tuple[float, ...]
    gap_low_factor: float = 0.5
    gap_high_factor: float = 1.5
    lateral_tolerance_mm: float = 10.0

    def __post_init__(self):
        if len(self.ys_mm) < 2:
            raise ValueError("template needs at least two disc positions")
        gaps = np.diff(self.ys_mm)
        if np.any(gaps <= 0):
            raise ValueError("template positions must be strictly increasing in y")

    @property
    def gaps_mm(self) -> np.ndarray:
        return np.diff(np.asarray(self.ys_mm, dtype=np.float64))

    @classmethod
    def uniform(cls, v: int = 11, gap_mm: float = 35.0, **kw) -> "SkeletonTemplate":
        return cls(ys_mm=tuple(i * gap_mm for i in range(v)), **kw)


@dataclass
class SelectionCost:
    """How much work a selector did: subset evaluations (or network passes)
    and wall time."""

    subsets_evaluated: int
    wall_time_s: float


def count_selections(m: int, n: int) -> int:
    """Exact C(m, n) via the multiplicative formula (exact integer
    arithmetic; no factorial overflow)."""
    if n < 0 or m < 0 or n > m:
        raise ValueError(f"C({m}, {n}) is undefined")
    n = min(n, m - n)
    out = 1
    for i in range(1, n + 1):
        # product of i consecutive integers is divisible by i!
        out = out * (m - n + i) // i
    return out


# ---------------------------------------------------------------------------
# exhaustive search tree


def _subset_error(ys, xs, tgaps, idx, lam=LATERAL_PENALTY):
    """Error of one y-sorted subset; the reference arithmetic the fast
    kernel must reproduce bit for bit (same accumulation order)."""
    n = len(idx)
    gerr = 0.0
    for i in range(1, n):
        d = ys[idx[i]] - ys[idx[i - 1]] - tgaps[i - 1]
        gerr += d * d
    sx = 0.0
    sxx = 0.0
    for i in range(n):
        sx += xs[idx[i]]
        sxx += xs[idx[i]] * xs[idx[i]]
    return gerr + lam * (sxx - sx * sx / n)


def _best_subset_python(ys, xs, tgaps, n, lam=LATERAL_PENALTY):
    best_err = np.inf
    best = None
    count = 0
    for idx in itertools.combinations(range(len(ys)), n):
        count += 1
        err = _subset_error(ys, xs, tgaps, idx, lam)
        if err < best_err:
            best_err = err
            best = idx
    return np.array(best, dtype=np.int64), best_err, count


if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _best_subset_kernel(ys, xs, tgaps, n, lam):  # pragma: no cover - jitted
        m = ys.shape[0]
        idx = np.empty(n, dtype=np.int64)
        for i in range(n):
            idx[i] = i
        gap_pref = np.zeros(n)
        sx_pref = np.zeros(n)
        sxx_pref = np.zeros(n)
        best = np.empty(n, dtype=np.int64)
        best_err = np.inf
        count = 0
        pos = 0  # recompute prefixes from this position on
        while True:
            for i in range(pos, n):
                j = idx[i]
                if i == 0:
                    gap_pref[0] = 0.0
                    sx_pref[0] = xs[j]
                    sxx_pref[0] = xs[j] * xs[j]
                else:
                    d = ys[j] - ys[idx[i - 1]] - tgaps[i - 1]
                    gap_pref[i] = gap_pref[i - 1] + d * d
                    sx_pref[i] = sx_pref[i - 1] + xs[j]
                    sxx_pref[i] = sxx_pref[i - 1] + xs[j] * xs[j]
            err = gap_pref[n - 1] + lam * (sxx_pref[n - 1] - sx_pref[n - 1] * sx_pref[n - 1] / n)
            count += 1
            if err < best_err:
                best_err = err
                for i in range(n):
                    best[i] = idx[i]
            # advance to the next combination in lexicographic order
            k = n - 1
            while k >= 0 and idx[k] == m - n + k:
                k -= 1
            if k < 0:
                break
            idx[k] += 1
            for i in range(k + 1, n):
                idx[i] = idx[i - 1] + 1
            pos = k
        return best, best_err, count


def _best_subset(ys, xs, tgaps, n, use_numba=True):
    if _HAVE_NUMBA and use_numba:
        return _best_subset_kernel(
            np.ascontiguousarray(ys), np.ascontiguousarray(xs),
            np.ascontiguousarray(tgaps), n, LATERAL_PENALTY,
        )
    return _best_subset_python(ys, xs, tgaps, n)


def search_tree_select(
    cs: CandidateSet,
    template: SkeletonTemplate,
    n: int,
    scheme: LabelScheme | None = None,
    use_numba: bool = True,
) -> tuple[SelectionResult, SelectionCost]:
    """Exhaustively pick the N-subset best matching the skeleton template.

    Kept candidates get probability 1.0 and labels in y order; the cost
    counter equals C(M, N) by construction. Raises for N > M.
    """
    m = len(cs)
    if n > m:
        raise InfeasibleSelectionError(f"cannot select {n} of {m} candidates")
    if n < 0:
        raise ValueError("n must be non-negative")
    coords = cs.coords()
    start = time.perf_counter()
    if n == 0:
        best_sorted: list[int] = []
        count = 1
    else:
        if n - 1 > len(template.gaps_mm):
            raise ValueError(
                f"template has {len(template.gaps_mm)} gaps; cannot score {n}-subsets"
            )
        order = sorted(range(m), key=lambda i: (coords[i, 1], coords[i, 0], i))
        ys = coords[order, 1]
        xs = coords[order, 0]
        tgaps = template.gaps_mm[: n - 1]
        best, _, count = _best_subset(ys, xs, tgaps, n, use_numba=use_numba)
        best_sorted = [order[i] for i in best]
    elapsed = time.perf_counter() - start
    scheme = scheme or default_scheme()
    labels = scheme.names_for(len(best_sorted))
    keep_set = set(best_sorted)
    kept = [(cs.points[i], 1.0, labels[k]) for k, i in enumerate(best_sorted)]
    rejected = [(cs.points[i], 0.0) for i in range(m) if i not in keep_set]
    result = SelectionResult(kept=kept, rejected=rejected)
    return result, SelectionCost(subsets_evaluated=count, wall_time_s=elapsed)


# ---------------------------------------------------------------------------
# greedy condition-based filter


def condition_filter(
    cs: CandidateSet,
    template: SkeletonTemplate,
    scheme: LabelScheme | None = None,
) -> SelectionResult:
    """Greedy top-down gap/laterality filter; single pass, no backtracking.

    The first candidate (most superior) is always kept and seeds the running
    column mean; each later candidate is kept iff its y-gap to the last kept
    candidate lies in [low_factor * min_gap, high_factor * max_gap] and its
    lateral deviation from the running mean x of kept candidates is within
    tolerance.
    """
    m = len(cs)
    coords = cs.coords()
    order = sorted(range(m), key=lambda i: (coords[i, 1], coords[i, 0], i))
    gaps = template.gaps_mm
    lo = template.gap_low_factor * gaps.min()
    hi = template.gap_high_factor * gaps.max()
    kept_idx: list[int] = []
    mean_x = 0.0
    last_y = 0.0
    for i in order:
        x, y = coords[i]
        if not kept_idx:
            kept_idx.append(i)
            mean_x, last_y = x, y
            continue
        gap = y - last_y
        if lo <= gap <= hi and abs(x - mean_x) <= template.lateral_tolerance_mm:
            kept_idx.append(i)
            mean_x += (x - mean_x) / len(kept_idx)
            last_y = y
    scheme = scheme or default_scheme()
    labels = scheme.names_for(len(kept_idx))
    keep_set = set(kept_idx)
    kept = [(cs.points[i], 1.0, labels[k]) for k, i in enumerate(kept_idx)]
    rejected = [(cs.points[i], 0.0) for i in range(m) if i not in keep_set]
    return SelectionResult(kept=kept, rejected=rejected)
