"""Synthetic spine-candidate benchmark: generation, metrics, cost curves.

A case is a noisy detector output for one synthetic spine: V true-positive
candidates jittered around a randomly spaced disc column, plus k false
positives scattered uniformly but rejected within a minimum distance of any
true candidate. Keeping that minimum distance above the 5 mm matching rule
makes the benchmark well-posed: a selector that keeps exactly the true
candidates scores FNR = FPR = 0.

Metrics follow the keypoint-evaluation conventions: predictions are greedily
matched to ground truth in ascending distance, a match counts only under
5 mm, unmatched predictions are false positives (rate per prediction),
unmatched ground truths false negatives (rate per ground truth), and the
distance-to-target is reported as mean(+-population std) over matched
pairs. Candidate-level classification quality is summarized with a
confusion matrix, F1, accuracy, sensitivity, specificity, and rank-based
(Mann-Whitney, midrank ties) AUC.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from . import baselines, lookonce
from .baselines import SkeletonTemplate, count_selections
from .heatmap import DiscCandidate, Point2D
from .lookonce import CandidateSet, GroundTruthFlag, LookOnceModel

MATCH_RADIUS_MM = 5.0


class GenerationError(RuntimeError):
    """Could not place a false positive under the distance constraint."""


class UndefinedMetricError(ValueError):
    """A metric's preconditions (e.g. at least one matched pair) failed."""


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and noise knobs for synthetic candidate sets.

    Distances in millimetres. `fp_min_dist_mm` defaults just above the 5 mm
    matching rule so injected false positives can never be confused with
    true candidates. False positives are drawn uniformly from the column's
    bounding box widened by `fp_x_halfwidth_mm` / `fp_y_margin_mm`.
    """

    v: int = 11
    mean_gap_mm: float = 35.0
    gap_jitter_mm: float = 4.0
    column_x_mm: float = 0.0
    lateral_jitter_mm: float = 3.0
    tp_noise_mm: float = 2.0
    fp_count: int = 10
    fp_min_dist_mm: float = 6.0
    fp_x_halfwidth_mm: float = 70.0
    fp_y_margin_mm: float = 20.0
    drop_tp_probability: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("mean_gap_mm", "tp_noise_mm", "fp_min_dist_mm",
                     "fp_x_halfwidth_mm", "fp_y_margin_mm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.drop_tp_probability <= 1.0:
            raise ValueError("drop_tp_probability must be in [0, 1]")
        if self.v < 1 or self.fp_count < 0:
            raise ValueError("v must be >= 1 and fp_count >= 0")

    def template(self, **kw) -> SkeletonTemplate:
        return SkeletonTemplate.uniform(v=self.v, gap_mm=self.mean_gap_mm, **kw)


_MAX_FP_ATTEMPTS = 1000


def generate_case(cfg: SynthConfig, rng: np.random.Generator, image_id: str = "case") -> CandidateSet:
    """One synthetic candidate set with per-point TP/FP truth flags.

    Disc y-gaps are Normal(mean_gap, gap_jitter) (floored at 1 mm), x sits
    on the column with lateral jitter; each surviving true candidate gets
    2D Gaussian position noise. At least one true candidate always
    survives the drop step. Point order is shuffled so it carries no
    signal.
    """
    gaps = cfg.mean_gap_mm + cfg.gap_jitter_mm * rng.standard_normal(cfg.v - 1)
    gaps = np.maximum(gaps, 1.0)
    ys = np.concatenate([[0.0], np.cumsum(gaps)])
    xs = cfg.column_x_mm + cfg.lateral_jitter_mm * rng.standard_normal(cfg.v)

    keep = np.ones(cfg.v, dtype=bool)
    if cfg.drop_tp_probability > 0.0:
        keep = rng.random(cfg.v) >= cfg.drop_tp_probability
        while not keep.any():  # a set must retain at least one true candidate
            keep = rng.random(cfg.v) >= cfg.drop_tp_probability

    tp_points: list[tuple[float, float, int]] = []
    for i in range(cfg.v):
        noise = cfg.tp_noise_mm * rng.standard_normal(2)
        if keep[i]:
            tp_points.append((xs[i] + noise[0], ys[i] + noise[1], i))

    tp_xy = np.array([(x, y) for x, y, _ in tp_points])
    x_lo = cfg.column_x_mm - cfg.fp_x_halfwidth_mm
    x_hi = cfg.column_x_mm + cfg.fp_x_halfwidth_mm
    y_lo = ys[0] - cfg.fp_y_margin_mm
    y_hi = ys[-1] + cfg.fp_y_margin_mm
    min_d2 = cfg.fp_min_dist_mm**2
    fp_points: list[tuple[float, float]] = []
    for k in range(cfg.fp_count):
        for attempt in range(_MAX_FP_ATTEMPTS):
            x = rng.uniform(x_lo, x_hi)
            y = rng.uniform(y_lo, y_hi)
            d2 = ((tp_xy - (x, y)) ** 2).sum(axis=1)
            if d2.min() >= min_d2:
                fp_points.append((x, y))
                break
        else:
            raise GenerationError(
                f"could not place false positive {k} after {_MAX_FP_ATTEMPTS} attempts"
            )

    points: list[DiscCandidate] = []
    flags: list[GroundTruthFlag] = []
    for x, y, i in tp_points:
        points.append(DiscCandidate(position=Point2D(x=float(x), y=float(y)), score=1.0))
        flags.append(GroundTruthFlag(is_tp=True, gt_index=i))
    for x, y in fp_points:
        points.append(DiscCandidate(position=Point2D(x=float(x), y=float(y)), score=1.0))
        flags.append(GroundTruthFlag(is_tp=False))
    perm = rng.permutation(len(points))
    return CandidateSet(
        points=[points[i] for i in perm],
        image_id=image_id,
        ground_truth=[flags[i] for i in perm],
    )


def generate_dataset(cfg: SynthConfig, n_cases: int, jobs: int = 1) -> list[CandidateSet]:
    """n_cases independent cases; per-case child seeds make the output
    identical for any job count."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n_cases)
    ids = [f"case-{i:05d}" for i in range(n_cases)]
    if jobs <= 1:
        return [
            generate_case(cfg, np.random.default_rng(s), image_id=i)
            for s, i in zip(seeds, ids)
        ]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_gen_one, [(cfg, s, i) for s, i in zip(seeds, ids)], chunksize=16))


def _gen_one(args):
    cfg, seed, image_id = args
    return generate_case(cfg, np.random.default_rng(seed), image_id=image_id)


def split_dataset(cases: Sequence[CandidateSet], ratios=(0.7, 0.15, 0.15)) -> tuple[list, list, list]:
    """Positional train/val/test split (cases are i.i.d. by construction)."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = len(cases)
    n_train = round(ratios[0] * n)
    n_val = round(ratios[1] * n)
    return list(cases[:n_train]), list(cases[n_train : n_train + n_val]), list(cases[n_train + n_val :])


# ---------------------------------------------------------------------------
# dataset files (JSON lines, one candidate set per line)


def case_to_dict(cs: CandidateSet, v: int) -> dict:
    pts = []
    for i, p in enumerate(cs.points):
        d = {"x_mm": p.position.x, "y_mm": p.position.y, "score": p.score}
        if cs.ground_truth is not None:
            g = cs.ground_truth[i]
            d["is_tp"] = g.is_tp
            d["gt_index"] = g.gt_index
        pts.append(d)
    return {"image_id": cs.image_id, "points": pts, "V": v}


def case_from_dict(doc: dict) -> CandidateSet:
    points, flags = [], []
    has_gt = False
    for p in doc["points"]:
        points.append(DiscCandidate(position=Point2D(x=p["x_mm"], y=p["y_mm"]),
                                    score=p.get("score", 1.0)))
        if "is_tp" in p:
            has_gt = True
            flags.append(GroundTruthFlag(is_tp=bool(p["is_tp"]), gt_index=p.get("gt_index")))
        else:
            flags.append(GroundTruthFlag(is_tp=False))
    return CandidateSet(points=points, image_id=doc["image_id"],
                        ground_truth=flags if has_gt else None)


def write_cases(cases: Sequence[CandidateSet], path: str | Path, v: int) -> None:
    with open(path, "w") as fh:
        for cs in cases:
            fh.write(json.dumps(case_to_dict(cs, v), sort_keys=True) + "\n")


def read_cases(path: str | Path) -> list[CandidateSet]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(case_from_dict(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed candidate set ({exc})") from exc
    return out


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MatchResult:
    """Greedy prediction/ground-truth matching under the 5 mm rule."""

    pairs: list[tuple[int, int, float]]  # (pred index, gt index, distance)
    n_pred: int
    n_gt: int

    @property
    def n_fp(self) -> int:
        return self.n_pred - len(self.pairs)

    @property
    def n_fn(self) -> int:
        return self.n_gt - len(self.pairs)

    @property
    def fnr_pct(self) -> float:
        return 100.0 * self.n_fn / self.n_gt if self.n_gt else 0.0

    @property
    def fpr_pct(self) -> float:
        # zero predictions -> 0% by convention (nothing was predicted wrongly)
        return 100.0 * self.n_fp / self.n_pred if self.n_pred else 0.0


def match_and_rate(
    pred: Sequence[Point2D],
    gt: Sequence[Point2D],
    radius_mm: float = MATCH_RADIUS_MM,
) -> MatchResult:
    """Match predictions to ground truth greedily by ascending distance.

    Only pairs strictly closer than `radius_mm` can match ("at least
    radius away" counts as a miss). Each prediction and each ground truth
    is used at most once. Ties break on (prediction, ground truth) index.
    """
    cands = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            d = p.distance_to(g)
            if d < radius_mm:
                cands.append((d, i, j))
    cands.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    pairs = []
    for d, i, j in cands:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j, d))
    return MatchResult(pairs=pairs, n_pred=len(pred), n_gt=len(gt))


def dtt(pairs: Sequence[tuple[int, int, float]]) -> tuple[float, float]:
    """Distance to target over matched pairs: (mean, population std) in mm."""
    if not pairs:
        raise UndefinedMetricError("distance to target needs at least one matched pair")
    d = np.array([p[2] for p in pairs], dtype=np.float64)
    return float(d.mean()), float(d.std())


@dataclass
class MetricReport:
    """Candidate-classification and point-matching quality in one record.

    Point-level fields (dtt/fnr/fpr) are None until a selection has been
    matched against ground truth positions; auc is None when only one class
    is present.
    """

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    f1: float = 0.0
    accuracy: float = 0.0
    sensitivity: float = 0.0
    specificity: float = 0.0
    auc: float | None = None
    dtt_mean_mm: float | None = None
    dtt_std_mm: float | None = None
    fnr_pct: float | None = None
    fpr_pct: float | None = None

    def counts(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def rank_auc(scores: np.ndarray, flags: np.ndarray) -> float | None:
    """Mann-Whitney AUC with midrank tie handling; None for one-class input."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    n_neg = flags.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(
    scores: Sequence[float],
    flags: Sequence[bool],
    threshold: float = 0.5,
    decisions: Sequence[bool] | None = None,
) -> MetricReport:
    """Confusion counts and summary scores for per-candidate keep decisions.

    Decisions default to `score > threshold`; pass `decisions` explicitly
    for top-N protocols. AUC always comes from the raw scores and is None
    when ground truth has a single class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags, dtype=bool)
    if scores.shape != flags.shape:
        raise ValueError(f"scores {scores.shape} and flags {flags.shape} differ in length")
    keep = scores > threshold if decisions is None else np.asarray(decisions, dtype=bool)
    tp = int((keep & flags).sum())
    fp = int((keep & ~flags).sum())
    fn = int((~keep & flags).sum())
    tn = int((~keep & ~flags).sum())
    total = tp + fp + fn + tn
    return MetricReport(
        tp=tp, fp=fp, fn=fn, tn=tn,
        f1=2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0,
        accuracy=(tp + tn) / total if total else 0.0,
        sensitivity=tp / (tp + fn) if (tp + fn) else 0.0,
        specificity=tn / (tn + fp) if (tn + fp) else 0.0,
        auc=rank_auc(scores, flags),
    )


# ---------------------------------------------------------------------------
# inference-cost benchmark


@dataclass
class BenchRow:
    method: str
    extra_fp: int
    m: int
    n: int
    operations: int  # subset evaluations, or network passes
    wall_time_ms: float


def bench_inference(
    model: LookOnceModel,
    fp_counts: Sequence[int],
    base_cfg: SynthConfig | None = None,
    methods: Sequence[str] = ("lookonce", "search-tree"),
    repeats: int = 7,
    seed: int = 0,
) -> list[BenchRow]:
    """Operation counts and median wall time per method per FP count.

    One case per FP count (same case for every method), `repeats` timed
    runs each, median reported. Operation counts are deterministic:
    C(M, N) for the exhaustive tree, 1 pass for the one-pass refiner, 1
    scan for the condition filter.
    """
    base_cfg = base_cfg or SynthConfig()
    if repeats < 5:
        raise ValueError("need at least 5 repetitions for a stable median")
    rows: list[BenchRow] = []
    for k in fp_counts:
        cfg = replace(base_cfg, fp_count=k, drop_tp_probability=0.0, seed=seed + k)
        case = generate_case(cfg, np.random.default_rng(cfg.seed), image_id=f"bench-fp{k}")
        template = cfg.template()
        m, n = len(case), cfg.v
        for method in methods:
            if method == "lookonce":
                runner = lambda: lookonce.refine(case, model, expected_count=n)
                ops = 1
            elif method == "search-tree":
                runner = lambda: baselines.search_tree_select(case, template, n)
                ops = count_selections(m, n)
            elif method == "condition":
                runner = lambda: baselines.condition_filter(case, template)
                ops = 1
            else:
                raise ValueError(f"unknown benchmark method {method!r}")
            runner()  # warm-up (JIT compilation, caches) outside the timers
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                runner()
                times.append(time.perf_counter() - t0)
            if method == "lookonce":
                lookonce.reset_pass_count()
                runner()
                ops = lookonce.pass_count()
            rows.append(BenchRow(
                method=method, extra_fp=k, m=m, n=n, operations=ops,
                wall_time_ms=1e3 * float(np.median(times)),
            ))
    return rows
