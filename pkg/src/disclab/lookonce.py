"""Permutation-invariant one-pass refinement of disc candidate sets.

Given M unlabeled 2D candidates, the network classifies every candidate as
keep/reject in a single forward pass, instead of scoring N-subsets one at a
time. The pipeline per set:

  normalize   subtract the set centroid, divide by a scale constant frozen
              at training time (translation invariance for free)
  transform   a small shared-kernel point network predicts a 2x2 alignment
              matrix (identity at initialization) applied to all points
  encode      shared per-point MLP 2->32->64->128, column-wise max pool for
              a global signature, concat(local, global) per point -> 256
  attention   a 256->64->256 branch + sigmoid produces per-point feature
              gates modelling geometric relations; features are rescaled
  classify    one affine layer 256->2 + row softmax; column 1 = keep prob

Every stage is either permutation-equivariant (shared kernels) or
permutation-invariant (max pool), so candidate order cannot change any
candidate's probability. The module counts full forward passes (see
`pass_count`) to make the one-pass contract measurable against
subset-enumeration baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit
from .heatmap import DiscCandidate, LabelScheme, Point2D, default_scheme
from .numkit import OptimizerState, ParamStore, Var, as_var

DEFAULT_WIDTHS = {
    "transform": [2, 16, 32, 16, 4],
    "encoder": [2, 32, 64, 128],
    "relation": [256, 64, 256],
    "classes": 2,
}


class InfeasibleSelectionError(ValueError):
    """Asked to keep more candidates than the set contains."""


@dataclass(frozen=True)
class GroundTruthFlag:
    """Per-candidate truth: is this a real disc, and if so which one."""

    is_tp: bool
    gt_index: int | None = None


@dataclass
class CandidateSet:
    """An unordered set of disc candidates for one image, with optional
    per-candidate truth flags aligned to `points`."""

    points: list[DiscCandidate]
    image_id: str = ""
    ground_truth: list[GroundTruthFlag] | None = None

    def __post_init__(self):
        if not self.points:
            raise numkit.EmptySetError("candidate set is empty")
        if self.ground_truth is not None and len(self.ground_truth) != len(self.points):
            raise ValueError("ground truth flags must align with points")

    def __len__(self) -> int:
        return len(self.points)

    def coords(self) -> np.ndarray:
        return np.array([[p.position.x, p.position.y] for p in self.points], dtype=np.float64)

    def flags(self) -> np.ndarray:
        if self.ground_truth is None:
            raise ValueError(f"candidate set {self.image_id!r} has no ground truth")
        return np.array([g.is_tp for g in self.ground_truth], dtype=bool)

    def tp_count(self) -> int:
        return int(self.flags().sum())


@dataclass
class SelectionResult:
    """Partition of a candidate set into kept (with assigned labels, ordered
    superior to inferior) and rejected, each with its keep-probability."""

    kept: list[tuple[DiscCandidate, float, str]]
    rejected: list[tuple[DiscCandidate, float]]

    def kept_positions(self) -> list[Point2D]:
        return [c.position for c, _, _ in self.kept]

    def size(self) -> int:
        return len(self.kept) + len(self.rejected)


@dataclass
class LookOnceModel:
    """Learned parameters plus the architecture descriptor and the
    coordinate scale frozen from training data."""

    store: ParamStore
    widths: dict
    coord_scale: float = 1.0
    meta: dict = field(default_factory=dict)


# Module-level instrumentation: number of full network forward passes.
# Benchmarks reset it around a measured region; not meant to be thread-safe.
_FORWARD_PASSES = 0


def pass_count() -> int:
    return _FORWARD_PASSES


def reset_pass_count() -> None:
    global _FORWARD_PASSES
    _FORWARD_PASSES = 0


def build_model(
    seed: int = 0,
    coord_scale: float = 1.0,
    widths: dict | None = None,
    meta: dict | None = None,
) -> LookOnceModel:
    """Fresh model: glorot weights, zero biases, except the transform
    predictor's last layer which is zero-weight with an identity bias so the
    initial alignment is exactly the identity."""
    widths = dict(DEFAULT_WIDTHS if widths is None else widths)
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def dense(prefix, i, d_in, d_out, zero=False):
        w = np.zeros((d_in, d_out)) if zero else numkit.glorot_uniform(rng, d_in, d_out)
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(d_out))

    tw = widths["transform"]
    # shared point layers, then the pooled head; last layer predicts the 2x2
    dense("transform", 0, tw[0], tw[1])
    dense("transform", 1, tw[1], tw[2])
    dense("transform", 2, tw[2], tw[3])
    dense("transform", 3, tw[3], tw[4], zero=True)
    store["transform.b3"].value = np.eye(2).reshape(-1).astype(np.float64)

    ew = widths["encoder"]
    for i in range(len(ew) - 1):
        dense("encoder", i, ew[i], ew[i + 1])

    rw = widths["relation"]
    for i in range(len(rw) - 1):
        dense("relation", i, rw[i], rw[i + 1])

    feat_dim = 2 * ew[-1]
    dense("classifier", 0, feat_dim, widths["classes"])

    return LookOnceModel(store=store, widths=widths, coord_scale=float(coord_scale),
                         meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# forward stages (Var-level internals + ndarray-level public ops)


def normalize_set(cs: CandidateSet, model: LookOnceModel) -> tuple[np.ndarray, np.ndarray, float]:
    """Center coordinates on the set centroid and divide by the model's
    scale constant; returns (normalized, centroid, scale) so callers can
    invert the transform."""
    coords = cs.coords()
    centroid = coords.mean(axis=0)
    return (coords - centroid) / model.coord_scale, centroid, model.coord_scale


def _transform_var(points: Var, model: LookOnceModel) -> tuple[Var, Var]:
    s = model.store
    h = numkit.relu(numkit.affine(points, s["transform.W0"], s["transform.b0"]))
    h = numkit.relu(numkit.affine(h, s["transform.W1"], s["transform.b1"]))
    pooled, _ = numkit.max_pool_set(h)
    head = numkit.reshape(pooled, (1, pooled.value.shape[0]))
    head = numkit.relu(numkit.affine(head, s["transform.W2"], s["transform.b2"]))
    t_flat = numkit.affine(head, s["transform.W3"], s["transform.b3"])
    t = numkit.reshape(t_flat, (2, 2))
    return numkit.matmul(points, t), t


def _encode_var(aligned: Var, model: LookOnceModel) -> Var:
    s = model.store
    n_layers = len(model.widths["encoder"]) - 1
    h = aligned
    for i in range(n_layers):
        h = numkit.relu(numkit.affine(h, s[f"encoder.W{i}"], s[f"encoder.b{i}"]))
    pooled, _ = numkit.max_pool_set(h)
    return numkit.concat_local_global(h, pooled)


def _attention_var(features: Var, model: LookOnceModel) -> Var:
    s = model.store
    h = numkit.relu(numkit.affine(features, s["relation.W0"], s["relation.b0"]))
    z = numkit.affine(h, s["relation.W1"], s["relation.b1"])
    gates = numkit.sigmoid(z)
    return numkit.mul(gates, features)


def _logits_var(coords_norm, model: LookOnceModel) -> Var:
    global _FORWARD_PASSES
    _FORWARD_PASSES += 1
    p = as_var(coords_norm)
    aligned, _ = _transform_var(p, model)
    feats = _encode_var(aligned, model)
    scaled = _attention_var(feats, model)
    return numkit.affine(scaled, model.store["classifier.W0"], model.store["classifier.b0"])


def input_transform(points: np.ndarray, model: LookOnceModel) -> tuple[np.ndarray, np.ndarray]:
    """Predict the 2x2 alignment matrix and apply it: returns (aligned, T).

    The predictor pools over points, so any row permutation yields the same
    T; a freshly built model returns T = identity.
    """
    aligned, t = _transform_var(as_var(points), model)
    return aligned.value, t.value


def encode(aligned: np.ndarray, model: LookOnceModel) -> np.ndarray:
    """Per-point features: concat(shared-MLP local, max-pooled global)."""
    return _encode_var(as_var(aligned), model).value


def geometric_attention(features: np.ndarray, model: LookOnceModel) -> np.ndarray:
    """Rescale features by sigmoid gates from the relation branch."""
    return _attention_var(as_var(features), model).value


def classify(scaled: np.ndarray, model: LookOnceModel) -> np.ndarray:
    """Per-point class probabilities (column 1 = keep)."""
    s = model.store
    logits = numkit.affine(as_var(scaled), s["classifier.W0"], s["classifier.b0"])
    return numkit.softmax_rows(logits).value


def score_candidates(cs: CandidateSet, model: LookOnceModel) -> np.ndarray:
    """Keep-probability per candidate from exactly one network pass."""
    coords_norm, _, _ = normalize_set(cs, model)
    logits = _logits_var(coords_norm, model)
    return numkit.softmax_rows(logits).value[:, 1]


def refine(
    cs: CandidateSet,
    model: LookOnceModel,
    expected_count: int | None = None,
    threshold: float = 0.5,
    scheme: LabelScheme | None = None,
) -> SelectionResult:
    """Select candidates in one pass and label them superior to inferior.

    With `expected_count` N, the N highest keep-probabilities are kept
    (probability ties resolved toward the earlier candidate); otherwise all
    candidates strictly above `threshold`. Kept candidates are sorted by y
    and assigned scheme labels top-down.
    """
    m = len(cs)
    if expected_count is not None:
        if expected_count > m:
            raise InfeasibleSelectionError(f"cannot keep {expected_count} of {m} candidates")
        if expected_count < 0:
            raise ValueError("expected_count must be non-negative")
    probs = score_candidates(cs, model)
    if expected_count is not None:
        order = sorted(range(m), key=lambda i: (-probs[i], i))
        keep_idx = set(order[:expected_count])
    else:
        keep_idx = {i for i in range(m) if probs[i] > threshold}
    scheme = scheme or default_scheme()
    kept_order = sorted(keep_idx, key=lambda i: (cs.points[i].position.y, i))
    labels = scheme.names_for(len(kept_order))
    kept = [(cs.points[i], float(probs[i]), labels[k]) for k, i in enumerate(kept_order)]
    rejected = [(cs.points[i], float(probs[i])) for i in range(m) if i not in keep_idx]
    return SelectionResult(kept=kept, rejected=rejected)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs. Small batches matter here: with ~1.4k training sets
    an epoch at batch 32 is only ~44 optimizer steps, far too few for the
    relational features to form; batch 8 with a stepped decay reaches a
    clearly better operating point in the same wall time."""

    epochs: int = 150
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed: int = 0
    threshold: float = 0.5
    decay_factor: float = 0.5
    decay_period_epochs: int = 50
    balance_classes: bool = True
    widths: dict | None = None


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float


def compute_coord_scale(sets: Sequence[CandidateSet]) -> float:
    """Mean RMS distance of points from their set centroid; 1.0 if degenerate."""
    radii = []
    for cs in sets:
        c = cs.coords()
        d = c - c.mean(axis=0)
        radii.append(float(np.sqrt((d * d).sum(axis=1).mean())))
    scale = float(np.mean(radii)) if radii else 0.0
    return scale if scale > 1e-9 else 1.0


def _class_weights(sets: Sequence[CandidateSet]) -> np.ndarray:
    """Inverse-frequency weights over (reject, keep); 1.0 for an absent class."""
    n_keep = sum(cs.tp_count() for cs in sets)
    n_total = sum(len(cs) for cs in sets)
    n_rej = n_total - n_keep
    w = np.ones(2)
    if n_keep > 0 and n_rej > 0:
        w[0] = n_total / (2.0 * n_rej)
        w[1] = n_total / (2.0 * n_keep)
    return w


def _batch_logits(coords3: np.ndarray, model: LookOnceModel) -> Var:
    """Logits for a stack of same-size sets, (B, M, 2) -> (B*M, 2).

    The shared-kernel stages operate row-wise, so stacking sets gives the
    same per-row results as one forward per set; pooling and the alignment
    matrix are computed per segment.
    """
    global _FORWARD_PASSES
    b, m, _ = coords3.shape
    _FORWARD_PASSES += b
    s = model.store
    flat = as_var(coords3.reshape(b * m, 2))
    h = numkit.relu(numkit.affine(flat, s["transform.W0"], s["transform.b0"]))
    h = numkit.relu(numkit.affine(h, s["transform.W1"], s["transform.b1"]))
    head = numkit.relu(numkit.affine(numkit.segment_max_pool(h, m),
                                     s["transform.W2"], s["transform.b2"]))
    t = numkit.reshape(numkit.affine(head, s["transform.W3"], s["transform.b3"]), (b, 2, 2))
    h = numkit.blockwise_matmul(flat, t, m)
    n_layers = len(model.widths["encoder"]) - 1
    for i in range(n_layers):
        h = numkit.relu(numkit.affine(h, s[f"encoder.W{i}"], s[f"encoder.b{i}"]))
    pooled = numkit.segment_max_pool(h, m)
    feats = numkit.concat_cols(h, numkit.tile_rows(pooled, m))
    hr = numkit.relu(numkit.affine(feats, s["relation.W0"], s["relation.b0"]))
    gates = numkit.sigmoid(numkit.affine(hr, s["relation.W1"], s["relation.b1"]))
    scaled = numkit.mul(gates, feats)
    return numkit.affine(scaled, s["classifier.W0"], s["classifier.b0"])


def _grouped_losses(batch, model, weights) -> list[tuple[int, Var]]:
    """Per-group (set_count, loss) for a batch, grouping sets by size so
    each group runs as one stacked forward."""
    groups: dict[int, list[CandidateSet]] = {}
    for cs in batch:
        groups.setdefault(len(cs), []).append(cs)
    out = []
    for m in sorted(groups):
        members = groups[m]
        coords3 = np.stack([normalize_set(cs, model)[0] for cs in members])
        logits = _batch_logits(coords3, model)
        labels = np.concatenate([cs.flags().astype(np.intp) for cs in members])
        out.append((len(members), numkit.softmax_cross_entropy(logits, labels, weights)))
    return out


def _f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def _validate(sets, model, weights):
    """Mean loss and pooled selection F1 (top-N per set, N = its TP count)."""
    total_loss, n_sets, tp, fp, fn = 0.0, 0, 0, 0, 0
    groups: dict[int, list[CandidateSet]] = {}
    for cs in sets:
        groups.setdefault(len(cs), []).append(cs)
    for m in sorted(groups):
        members = groups[m]
        coords3 = np.stack([normalize_set(cs, model)[0] for cs in members])
        logits = _batch_logits(coords3, model)
        labels = np.concatenate([cs.flags().astype(np.intp) for cs in members])
        total_loss += len(members) * float(
            numkit.softmax_cross_entropy(logits, labels, weights).value
        )
        n_sets += len(members)
        probs = numkit.softmax_rows(logits).value[:, 1].reshape(len(members), m)
        truth = labels.astype(bool).reshape(len(members), m)
        for row, cs in enumerate(members):
            n_keep = cs.tp_count()
            order = np.argsort(-probs[row], kind="stable")
            keep = np.zeros(m, dtype=bool)
            keep[order[:n_keep]] = True
            tp += int((keep & truth[row]).sum())
            fp += int((keep & ~truth[row]).sum())
            fn += int((~keep & truth[row]).sum())
    return total_loss / n_sets, _f1_from_counts(tp, fp, fn)


def train_lookonce(
    train: Sequence[CandidateSet],
    val: Sequence[CandidateSet],
    config: TrainConfig = TrainConfig(),
) -> tuple[LookOnceModel, list[EpochLog]]:
    """Train the refinement network; returns the best-val-F1 model + log.

    Minimizes class-weighted cross-entropy over keep/reject with Adam,
    shuffling set order each epoch from the seeded generator. Deterministic
    given the config seed: reruns produce the identical model and log.
    """
    if not train or not val:
        raise ValueError("training and validation sets must both be non-empty")
    for cs in train:
        if cs.tp_count() < 1:
            raise ValueError(f"training set {cs.image_id!r} has no true-positive candidate")
    model = build_model(
        seed=config.seed,
        coord_scale=compute_coord_scale(train),
        widths=config.widths,
        meta={"train_cases": len(train), "val_cases": len(val)},
    )
    weights = _class_weights(train) if config.balance_classes else np.ones(2)
    opt = OptimizerState(
        lr=config.learning_rate,
        decay_factor=config.decay_factor,
        decay_period_epochs=config.decay_period_epochs,
    )
    rng = np.random.default_rng(config.seed)
    log: list[EpochLog] = []
    best_f1 = -1.0
    best_values = model.store.clone_values()
    best_epoch = 0
    n = len(train)
    for epoch in range(config.epochs):
        opt.epoch = epoch
        order = rng.permutation(n)
        loss_sum, loss_count = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            model.store.zero_grad()
            grouped = _grouped_losses(batch, model, weights)
            total = None
            for count, loss in grouped:
                term = numkit.scale(loss, count / len(batch))
                total = term if total is None else numkit.add(total, term)
                loss_sum += count * float(loss.value)
                loss_count += count
            numkit.backward(total)
            numkit.adam_step(model.store, opt)
        val_loss, val_f1 = _validate(val, model, weights)
        log.append(EpochLog(epoch=epoch, train_loss=loss_sum / loss_count,
                            val_loss=val_loss, val_f1=val_f1))
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_values = model.store.clone_values()
            best_epoch = epoch
    model.store.load_values(best_values)
    model.meta.update({
        "best_epoch": best_epoch,
        "best_val_f1": best_f1,
        "epochs": config.epochs,
        "seed": config.seed,
        "class_weights": [float(w) for w in weights],
    })
    return model, log


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: LookOnceModel, path: str | Path) -> None:
    arch = {
        "kind": "lookonce",
        "widths": model.widths,
        "coord_scale": model.coord_scale,
        "meta": model.meta,
    }
    numkit.save_checkpoint(path, model.store, arch)


def load_model(path: str | Path) -> LookOnceModel:
    store, arch = numkit.load_checkpoint(path)
    if arch.get("kind") != "lookonce":
        raise ValueError(f"checkpoint at {path} is not a refinement model")
    return LookOnceModel(
        store=store,
        widths=arch["widths"],
        coord_scale=float(arch["coord_scale"]),
        meta=arch.get("meta", {}),
    )
