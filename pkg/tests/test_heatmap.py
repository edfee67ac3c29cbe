"""Rendering/extraction round trips and the MSE loss contract."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disclab import heatmap as hm
from disclab import numkit as nk


SCHEME = hm.default_scheme()


def test_render_center_amplitude_one():
    h = hm.render_heatmap([(hm.Point2D(50, 50), 0)], SCHEME, 128, 128)
    assert h.values[0, 50, 50] == 1.0


def test_render_truncates_beyond_radius():
    h = hm.render_heatmap([(hm.Point2D(50, 50), 0)], SCHEME, 128, 128)
    assert h.values[0, 61, 50] == 0.0  # 11 px away on the row axis
    assert h.values[0, 50, 61] == 0.0
    # at exactly the truncation radius the kernel is small but nonzero
    assert 0.0 < h.values[0, 60, 50] < 0.02


def test_render_empty_positions_all_zero():
    h = hm.render_heatmap([], SCHEME, 32, 24)
    assert not h.values.any()
    assert h.values.shape == (11, 32, 24)


def test_render_values_bounded_and_monotone():
    h = hm.render_heatmap([(hm.Point2D(20, 20), 0)], SCHEME, 64, 64)
    vals = h.values[0]
    assert vals.min() >= 0.0 and vals.max() <= 1.0
    # radially monotone non-increasing along a row through the center
    row = vals[20, 20:31]
    assert np.all(np.diff(row) <= 0)


def test_render_overlap_takes_maximum():
    near = [(hm.Point2D(30, 30), 0), (hm.Point2D(34, 30), 0)]
    h = hm.render_heatmap(near, SCHEME, 64, 64)
    assert h.values[0, 30, 30] == 1.0
    assert h.values[0, 30, 34] == 1.0
    assert h.values.max() <= 1.0


def test_render_position_out_of_grid_raises():
    with pytest.raises(hm.OutOfBoundsError):
        hm.render_heatmap([(hm.Point2D(500, 10), 0)], SCHEME, 64, 64)


def test_render_bad_channel_raises():
    with pytest.raises(ValueError, match="channel"):
        hm.render_heatmap([(hm.Point2D(10, 10), 11)], SCHEME, 64, 64)


def test_render_respects_pixel_size():
    h = hm.render_heatmap([(hm.Point2D(10.0, 6.0), 0)], SCHEME, 32, 32, pixel_size_mm=2.0)
    assert h.values[0, 3, 5] == 1.0


def test_extract_round_trip_well_separated():
    pts = [(hm.Point2D(30, 40), 0), (hm.Point2D(60, 90), 1), (hm.Point2D(20, 140), 2)]
    h = hm.render_heatmap(pts, SCHEME, 200, 100)
    cands = hm.extract_peaks(h)
    assert len(cands) == 3
    for (pt, ch), c in zip(pts, sorted(cands, key=lambda c: c.channel)):
        assert c.channel == ch
        assert c.position.distance_to(pt) <= 1.0
        assert c.score == pytest.approx(1.0)


def test_extract_all_zero_empty():
    assert hm.extract_peaks(hm.Heatmap(np.zeros((2, 16, 16)))) == []


def test_extract_suppresses_close_weaker_peak():
    vals = np.zeros((1, 32, 32))
    vals[0, 10, 10] = 0.9
    vals[0, 10, 15] = 0.8  # 5 px away, within the 10 px suppression radius
    cands = hm.extract_peaks(hm.Heatmap(vals))
    assert len(cands) == 1
    assert cands[0].position.x == 10 and cands[0].score == pytest.approx(0.9)


def test_extract_keeps_peaks_outside_radius():
    vals = np.zeros((1, 40, 40))
    vals[0, 10, 10] = 0.9
    vals[0, 10, 25] = 0.8  # 15 px away
    assert len(hm.extract_peaks(hm.Heatmap(vals))) == 2


def test_extract_threshold_filters():
    vals = np.zeros((1, 16, 16))
    vals[0, 8, 8] = 0.2
    assert hm.extract_peaks(hm.Heatmap(vals), threshold=0.3) == []
    assert len(hm.extract_peaks(hm.Heatmap(vals), threshold=0.1)) == 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_round_trip_property(seed):
    """Discs >= 25 px apart and >= 10 px from borders are recovered within
    1 px with no extras."""
    rng = np.random.default_rng(seed)
    height, width = 240, 120
    placed = []
    for _ in range(40):  # rejection-sample well-separated positions
        cand = (rng.uniform(12, width - 12), rng.uniform(12, height - 12))
        if all(np.hypot(cand[0] - p[0], cand[1] - p[1]) >= 25 for p in placed):
            placed.append(cand)
        if len(placed) == 6:
            break
    positions = [(hm.Point2D(x, y), i % SCHEME.v) for i, (x, y) in enumerate(placed)]
    h = hm.render_heatmap(positions, SCHEME, height, width)
    cands = hm.extract_peaks(h)
    assert len(cands) == len(positions)
    for pt, _ in positions:
        best = min(c.position.distance_to(pt) for c in cands)
        assert best <= 1.0


def test_mse_examples():
    a = hm.Heatmap(np.zeros((1, 4, 4)))
    b = hm.Heatmap(np.full((1, 4, 4), 0.5))
    assert hm.mse_loss(a, a) == 0.0
    assert hm.mse_loss(a, b) == pytest.approx(0.25)


def test_mse_shape_mismatch():
    with pytest.raises(nk.DimensionError):
        hm.mse_loss(np.zeros((1, 2, 2)), np.zeros((1, 3, 2)))


def test_mse_gradient_matches_finite_differences():
    store = nk.ParamStore()
    target = np.random.default_rng(0).uniform(0, 1, (2, 5, 5))
    pred = store.add("pred", np.random.default_rng(1).uniform(0, 1, (2, 5, 5)))

    def fn():
        return hm.mse_loss(pred, target)

    assert nk.grad_check(fn, store, tol=1e-4).passed


def test_heatmap_json_round_trip():
    h = hm.render_heatmap([(hm.Point2D(5, 6), 0)], hm.default_scheme(2), 16, 16)
    again = hm.Heatmap.from_json(h.to_json())
    assert np.array_equal(h.values, again.values)
    assert again.pixel_size_mm == h.pixel_size_mm


def test_label_scheme_contracts():
    assert SCHEME.v == 11
    assert SCHEME.names_for(3) == ["C2-C3", "C3-C4", "C4-C5"]
    assert len(SCHEME.names_for(13)) == 13  # falls back past the scheme
    with pytest.raises(ValueError):
        hm.LabelScheme(names=("a", "a"))
