"""Shape-attention recalibration block for feature pyramids.

The block injects an image-gradient "shape" signal into a pyramid of
feature maps. Per level j it learns a squeeze-and-excitation channel gate
from the globally pooled features and a scalar shape gate from the globally
pooled gradient signal, recalibrates the level as

    out_j = shape_gate * (channel_gates * P_j) + project(resample(sf))

and finally aggregates all recalibrated levels into one sigmoid-bounded
map: each level is projected to a common channel count (1x1), upsampled
nearest-neighbor to the finest resolution, weighted by a learned per-level
scalar, summed, and squashed.

The shape gate is a single scalar per forward pass: the gate network sees
only the globally pooled 2-vector of the gradient signal, which cannot
yield a spatial map. The gradient signal itself enters the residual path
through a learned 1x1 projection after area-average resampling, since its
2 channels cannot be added to a C_j-channel map directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit
from .numkit import DimensionError, ParamStore, Var, as_var

DEFAULT_BOTTLENECK_RATIO = 2
DEFAULT_GATE_HIDDEN = 8


@dataclass
class ShapeFeature:
    """Image gradients gx (columns) and gy (rows) plus their normalized
    magnitude; the shape signal consumed by the attention block."""

    gx: np.ndarray
    gy: np.ndarray
    magnitude: np.ndarray

    def stack(self) -> np.ndarray:
        """(2, H, W) gradient stack fed to the block."""
        return np.stack([self.gx, self.gy], axis=0)


def compute_shape_feature(image: np.ndarray) -> ShapeFeature:
    """Central-difference gradients (one-sided at borders) of a 2-d image.

    The magnitude map is sqrt(gx^2 + gy^2) rescaled by its maximum, so it
    lies in [0, 1]; a constant image yields all-zero maps.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise DimensionError(f"shape feature needs an HxW image with H,W >= 2, got {image.shape}")
    gy = np.gradient(image, axis=0)
    gx = np.gradient(image, axis=1)
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    return ShapeFeature(gx=gx, gy=gy, magnitude=mag)


@dataclass
class FeaturePyramid:
    """Multi-level feature maps, finest first; spatial sizes non-increasing."""

    levels: list[np.ndarray]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid needs at least one level")
        self.levels = [np.asarray(l, dtype=np.float64) for l in self.levels]
        prev = None
        for j, lvl in enumerate(self.levels):
            if lvl.ndim != 3:
                raise DimensionError(f"level {j} must be (C,H,W), got {lvl.shape}")
            if not np.all(np.isfinite(lvl)):
                raise ValueError(f"level {j} contains non-finite values")
            hw = lvl.shape[1:]
            if prev is not None and (hw[0] > prev[0] or hw[1] > prev[1]):
                raise ValueError(f"level {j} spatial size {hw} exceeds previous level {prev}")
            prev = hw

    @property
    def channel_counts(self) -> list[int]:
        return [l.shape[0] for l in self.levels]


class AttentionParams:
    """All learnable tensors of the block, registered in a ParamStore.

    Per level j: channel-gate matrices W1 (C_j -> C_j/r) and W2 (C_j/r ->
    C_j), a 1x1 shape projection S (2 -> C_j), and a 1x1 common-space
    projection Q (C_j -> out_channels). Shared across levels: the shape-gate
    matrices W3 (2 -> hidden) and W4 (hidden -> 1), and one aggregation
    scalar per level (initialized to 1/L). No biases, matching the gate
    formulas.
    """

    def __init__(
        self,
        channel_counts: Sequence[int],
        out_channels: int,
        ratio: int = DEFAULT_BOTTLENECK_RATIO,
        gate_hidden: int = DEFAULT_GATE_HIDDEN,
        rng: np.random.Generator | None = None,
        zero_init: bool = False,
    ):
        if not channel_counts:
            raise ValueError("need at least one pyramid level")
        if ratio < 1:
            raise ValueError("bottleneck ratio must be >= 1")
        for c in channel_counts:
            if c % ratio != 0:
                raise ValueError(f"bottleneck ratio {ratio} does not divide channel count {c}")
        rng = rng or np.random.default_rng(0)
        self.channel_counts = list(channel_counts)
        self.out_channels = out_channels
        self.ratio = ratio
        self.gate_hidden = gate_hidden
        self.store = ParamStore()

        def init(fan_in, fan_out):
            if zero_init:
                return np.zeros((fan_in, fan_out))
            return numkit.glorot_uniform(rng, fan_in, fan_out)

        for j, c in enumerate(channel_counts):
            self.store.add(f"level{j}.W1", init(c, c // ratio))
            self.store.add(f"level{j}.W2", init(c // ratio, c))
            self.store.add(f"level{j}.S", init(2, c))
            self.store.add(f"level{j}.Q", init(c, out_channels))
        self.store.add("shape_gate.W3", init(2, gate_hidden))
        self.store.add("shape_gate.W4", init(gate_hidden, 1))
        n_levels = len(channel_counts)
        self.store.add("level_weights", np.full(n_levels, 1.0 / n_levels))

    @property
    def n_levels(self) -> int:
        return len(self.channel_counts)

    def with_store(self, store: ParamStore) -> "AttentionParams":
        """A view of this block whose tensors live in `store` (lets a
        gradient check perturb inputs and parameters through one store)."""
        view = AttentionParams.__new__(AttentionParams)
        view.channel_counts = self.channel_counts
        view.out_channels = self.out_channels
        view.ratio = self.ratio
        view.gate_hidden = self.gate_hidden
        view.store = store
        return view


def _as_sf_var(sf) -> Var:
    if isinstance(sf, ShapeFeature):
        return as_var(sf.stack())
    v = as_var(sf)
    if v.value.ndim != 3 or v.value.shape[0] != 2:
        raise DimensionError(f"shape signal must be (2,H,W), got {v.value.shape}")
    return v


def channel_gates(p_j, params: AttentionParams, j: int) -> Var:
    """Per-channel sigmoid gates from the globally pooled level features."""
    p_j = as_var(p_j)
    c = p_j.value.shape[0]
    gap = numkit.reshape(numkit.mean_over(p_j, (1, 2)), (1, c))
    hidden = numkit.relu(numkit.matmul(gap, params.store[f"level{j}.W1"]))
    return numkit.sigmoid(numkit.matmul(hidden, params.store[f"level{j}.W2"]))


def shape_gate(sf, params: AttentionParams) -> Var:
    """Scalar sigmoid gate from the globally pooled gradient signal."""
    sf_var = _as_sf_var(sf)
    gap = numkit.reshape(numkit.mean_over(sf_var, (1, 2)), (1, 2))
    hidden = numkit.relu(numkit.matmul(gap, params.store["shape_gate.W3"]))
    gate = numkit.sigmoid(numkit.matmul(hidden, params.store["shape_gate.W4"]))
    return numkit.reshape(gate, ())


def _project_1x1(x: Var, w: Var) -> Var:
    """Apply a (C_in -> C_out) matrix at every pixel of a (C_in,H,W) map."""
    c, h, w_ = x.value.shape
    flat = numkit.reshape(numkit.transpose(x, (1, 2, 0)), (h * w_, c))
    proj = numkit.matmul(flat, w)
    c_out = w.value.shape[1]
    return numkit.transpose(numkit.reshape(proj, (h, w_, c_out)), (2, 0, 1))


def recalibrate_level(p_j, sf, params: AttentionParams, j: int) -> Var:
    """Recalibrate one pyramid level with channel and shape gates.

    out = shape_gate * (channel_gates * P_j) + S_j(resample(sf)), where the
    gradient signal is area-average resampled to the level's resolution and
    projected 1x1 to its channel count. Output shape equals the input shape.
    """
    p_j = as_var(p_j)
    if p_j.value.ndim != 3:
        raise DimensionError(f"level features must be (C,H,W), got {p_j.value.shape}")
    c, h, w = p_j.value.shape
    if c != params.channel_counts[j]:
        raise DimensionError(
            f"level {j} has {c} channels but parameters expect {params.channel_counts[j]}"
        )
    w_f = numkit.reshape(channel_gates(p_j, params, j), (c, 1, 1))
    w_sp = shape_gate(sf, params)
    sf_var = _as_sf_var(sf)
    sf_resampled = numkit.adaptive_avg_pool(sf_var, h, w)
    shape_term = _project_1x1(sf_resampled, params.store[f"level{j}.S"])
    return numkit.add(numkit.mul(w_sp, numkit.mul(w_f, p_j)), shape_term)


def aggregate_pyramid(levels: Sequence[Var], params: AttentionParams) -> Var:
    """Weighted sigmoid aggregation of recalibrated levels.

    Every level is projected to the common channel count, upsampled
    nearest-neighbor to the finest (first) level's spatial size, scaled by
    its learned weight, summed, and passed through a sigmoid, so outputs
    lie strictly in (0, 1).
    """
    if not levels:
        raise numkit.EmptySetError("aggregate_pyramid: no levels")
    levels = [as_var(l) for l in levels]
    out_h, out_w = levels[0].value.shape[1:]
    acc = None
    for j, lvl in enumerate(levels):
        proj = _project_1x1(lvl, params.store[f"level{j}.Q"])
        aligned = numkit.upsample_nearest(proj, out_h, out_w)
        weighted = numkit.mul(numkit.take(params.store["level_weights"], j), aligned)
        acc = weighted if acc is None else numkit.add(acc, weighted)
    return numkit.sigmoid(acc)


def run_block(pyramid: FeaturePyramid, sf: ShapeFeature, params: AttentionParams) -> tuple[list[Var], Var]:
    """Recalibrate every level and aggregate; returns (levels, fused map)."""
    recal = [recalibrate_level(lvl, sf, params, j) for j, lvl in enumerate(pyramid.levels)]
    return recal, aggregate_pyramid(recal, params)
