"""Gaussian detection-target rendering and peak extraction.

A detection target is a V-channel grid where each disc location is stamped
as a truncated Gaussian bump (amplitude 1 at the center pixel, zero beyond
`radius_px`, sigma = radius/3 so the kernel has decayed to ~0.011 at the
truncation edge). Overlapping bumps combine by pointwise maximum, keeping
targets in [0, 1]. `extract_peaks` is the inverse step: strict 3x3 local
maxima above a threshold, greedily non-max-suppressed, returned in
millimetres.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.ndimage import maximum_filter

from . import numkit
from .numkit import DimensionError, Var

DEFAULT_RADIUS_PX = 10
DEFAULT_SIGMA_PX = DEFAULT_RADIUS_PX / 3.0
DEFAULT_PEAK_THRESHOLD = 0.3
DEFAULT_NMS_RADIUS_PX = 10

# Disc names superior -> inferior for the default 11-channel scheme.
_DEFAULT_DISC_NAMES = (
    "C2-C3", "C3-C4", "C4-C5", "C5-C6", "C6-C7", "C7-T1",
    "T1-T2", "T2-T3", "T3-T4", "T4-T5", "T5-T6",
)


class OutOfBoundsError(ValueError):
    """A disc position falls outside the target grid."""


@dataclass(frozen=True)
class Point2D:
    """A 2D location in millimetres: x along left-right (columns), y along
    the superior-inferior axis (rows)."""

    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def distance_to(self, other: "Point2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class LabelScheme:
    """Ordered disc label names, superior to inferior."""

    names: tuple[str, ...] = _DEFAULT_DISC_NAMES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("disc labels must be unique")
        if not self.names:
            raise ValueError("label scheme needs at least one label")

    @property
    def v(self) -> int:
        return len(self.names)

    def names_for(self, k: int) -> list[str]:
        """Labels for k kept candidates in superior->inferior order; falls
        back to generated names past the end of the scheme."""
        out = list(self.names[:k])
        out.extend(f"disc-{i + 1:02d}" for i in range(len(out), k))
        return out


def default_scheme(v: int = 11) -> LabelScheme:
    if v == len(_DEFAULT_DISC_NAMES):
        return LabelScheme()
    return LabelScheme(tuple(f"disc-{i + 1:02d}" for i in range(v)))


@dataclass(frozen=True)
class DiscCandidate:
    """A candidate disc detection: position in mm, confidence in [0,1], and
    the source channel when known."""

    position: Point2D
    score: float = 1.0
    channel: int | None = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("candidate score must be finite")


@dataclass
class Heatmap:
    """V x H x W response grid with a pixel pitch in millimetres."""

    values: np.ndarray
    pixel_size_mm: float = 1.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise DimensionError(f"heatmap values must be (V,H,W), got {self.values.shape}")
        if self.pixel_size_mm <= 0:
            raise ValueError("pixel_size_mm must be positive")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def to_json(self) -> str:
        doc = {
            "pixel_size_mm": self.pixel_size_mm,
            "shape": list(self.values.shape),
            "values": self.values.tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Heatmap":
        doc = json.loads(text)
        values = np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"])
        return cls(values=values, pixel_size_mm=doc["pixel_size_mm"])


def render_heatmap(
    positions: Iterable[tuple[Point2D, int]],
    scheme: LabelScheme,
    height: int,
    width: int,
    pixel_size_mm: float = 1.0,
    radius_px: int = DEFAULT_RADIUS_PX,
    sigma_px: float = DEFAULT_SIGMA_PX,
) -> Heatmap:
    """Render ground-truth bumps for (position, channel) pairs.

    Each position is rounded to its nearest pixel, which receives value 1.0;
    values fall off as exp(-d^2 / (2 sigma^2)) and are cut to exactly zero
    beyond `radius_px`. Raises OutOfBoundsError for positions off the grid
    and ValueError for channels outside the scheme.
    """
    vals = np.zeros((scheme.v, height, width), dtype=np.float64)
    two_sigma_sq = 2.0 * sigma_px * sigma_px
    for pt, ch in positions:
        if not 0 <= ch < scheme.v:
            raise ValueError(f"channel {ch} outside [0, {scheme.v})")
        r0 = int(math.floor(pt.y / pixel_size_mm + 0.5))
        c0 = int(math.floor(pt.x / pixel_size_mm + 0.5))
        if not (0 <= r0 < height and 0 <= c0 < width):
            raise OutOfBoundsError(
                f"position ({pt.x}, {pt.y}) mm -> pixel ({r0}, {c0}) outside {height}x{width} grid"
            )
        rlo, rhi = max(0, r0 - radius_px), min(height, r0 + radius_px + 1)
        clo, chi = max(0, c0 - radius_px), min(width, c0 + radius_px + 1)
        rr = np.arange(rlo, rhi)[:, None] - r0
        cc = np.arange(clo, chi)[None, :] - c0
        d2 = rr * rr + cc * cc
        bump = np.where(d2 <= radius_px * radius_px, np.exp(-d2 / two_sigma_sq), 0.0)
        patch = vals[ch, rlo:rhi, clo:chi]
        np.maximum(patch, bump, out=patch)
    return Heatmap(values=vals, pixel_size_mm=pixel_size_mm)


_RING_3X3 = np.array([[1, 1, 1], [1, 0, 1], [1, 1, 1]], dtype=bool)


def extract_peaks(
    h: Heatmap,
    threshold: float = DEFAULT_PEAK_THRESHOLD,
    nms_radius_px: float = DEFAULT_NMS_RADIUS_PX,
) -> list[DiscCandidate]:
    """Local-maximum candidate extraction with greedy NMS, per channel.

    A pixel is a peak if it strictly exceeds its 8 in-bounds neighbors and
    its value is >= threshold. Peaks are visited in descending score
    (row-major on ties) and suppress later peaks within `nms_radius_px`.
    Positions are converted back to millimetres.
    """
    out: list[DiscCandidate] = []
    for ch in range(h.channels):
        plane = h.values[ch]
        neighbor_max = maximum_filter(plane, footprint=_RING_3X3, mode="constant", cval=-np.inf)
        rows, cols = np.nonzero((plane > neighbor_max) & (plane >= threshold))
        if rows.size == 0:
            continue
        scores = plane[rows, cols]
        order = np.lexsort((cols, rows, -scores))
        kept_r: list[int] = []
        kept_c: list[int] = []
        r2 = nms_radius_px * nms_radius_px
        for k in order:
            r, c = int(rows[k]), int(cols[k])
            if any((r - kr) ** 2 + (c - kc) ** 2 <= r2 for kr, kc in zip(kept_r, kept_c)):
                continue
            kept_r.append(r)
            kept_c.append(c)
            out.append(
                DiscCandidate(
                    position=Point2D(x=c * h.pixel_size_mm, y=r * h.pixel_size_mm),
                    score=float(plane[r, c]),
                    channel=ch,
                )
            )
    return out


def mse_loss(pred, target):
    """Mean squared difference over all V*H*W entries.

    Accepts Heatmap, ndarray, or numkit.Var operands; returns a float for
    plain arrays and a differentiable Var when either side is a Var.
    """
    def _raw(x):
        return x.values if isinstance(x, Heatmap) else x

    p, t = _raw(pred), _raw(target)
    p_shape = p.value.shape if isinstance(p, Var) else np.asarray(p).shape
    t_shape = t.value.shape if isinstance(t, Var) else np.asarray(t).shape
    if p_shape != t_shape:
        raise DimensionError(f"mse_loss: shapes {p_shape} and {t_shape} differ")
    if isinstance(p, Var) or isinstance(t, Var):
        return numkit.mean_all(numkit.square(numkit.sub(p, t)))
    diff = np.asarray(p, dtype=np.float64) - np.asarray(t, dtype=np.float64)
    return float(np.mean(diff * diff))
