"""Shape feature, recalibration, and pyramid aggregation contracts."""

import numpy as np
import pytest

from disclab import numkit as nk
from disclab import shape_attention as sa


def _pyramid_and_params(seed=0, channels=(4, 6), sizes=((10, 8), (5, 4)), out_channels=4):
    rng = np.random.default_rng(seed)
    levels = [rng.standard_normal((c, h, w)) for c, (h, w) in zip(channels, sizes)]
    params = sa.AttentionParams(list(channels), out_channels=out_channels, rng=rng)
    image = rng.standard_normal((12, 10))
    return sa.FeaturePyramid(levels=levels), sa.compute_shape_feature(image), params


# ---------------------------------------------------------------------------
# shape feature


def test_constant_image_zero_gradients():
    sf = sa.compute_shape_feature(np.full((8, 9), 3.7))
    assert not sf.gx.any() and not sf.gy.any() and not sf.magnitude.any()


def test_step_edge_localized():
    img = np.zeros((6, 10))
    img[:, 5:] = 1.0
    sf = sa.compute_shape_feature(img)
    nonzero_cols = np.nonzero(sf.magnitude.any(axis=0))[0]
    assert set(nonzero_cols) == {4, 5}  # central differences straddle the edge
    assert not sf.gy.any()


def test_linear_ramp_exact_gradient():
    s = 1.75
    img = s * np.tile(np.arange(12.0), (7, 1))
    sf = sa.compute_shape_feature(img)
    assert np.allclose(sf.gx, s)  # central difference of a linear map is exact
    assert np.allclose(sf.gy, 0.0)


def test_magnitude_normalized():
    rng = np.random.default_rng(3)
    sf = sa.compute_shape_feature(rng.standard_normal((16, 16)))
    assert sf.magnitude.max() == pytest.approx(1.0)
    assert sf.magnitude.min() >= 0.0


def test_degenerate_image_raises():
    with pytest.raises(nk.DimensionError):
        sa.compute_shape_feature(np.ones((1, 8)))


# ---------------------------------------------------------------------------
# recalibration


def test_zero_params_quarter_passthrough():
    rng = np.random.default_rng(1)
    params = sa.AttentionParams([4], out_channels=2, zero_init=True)
    p0 = rng.standard_normal((4, 6, 6))
    sf = sa.compute_shape_feature(rng.standard_normal((12, 12)))
    out = sa.recalibrate_level(p0, sf, params, 0)
    # gates are exactly sigmoid(0) = 0.5 and the projection is zero
    assert np.array_equal(out.value, 0.25 * p0)


def test_output_shape_preserved():
    pyramid, sf, params = _pyramid_and_params()
    for j, lvl in enumerate(pyramid.levels):
        out = sa.recalibrate_level(lvl, sf, params, j)
        assert out.value.shape == lvl.shape


def test_channel_mismatch_raises():
    pyramid, sf, params = _pyramid_and_params()
    with pytest.raises(nk.DimensionError):
        sa.recalibrate_level(np.zeros((3, 5, 5)), sf, params, 0)


def test_gates_strictly_in_unit_interval():
    pyramid, sf, params = _pyramid_and_params(seed=7)
    for j, lvl in enumerate(pyramid.levels):
        gates = sa.channel_gates(lvl, params, j).value
        assert np.all(gates > 0.0) and np.all(gates < 1.0)
    w_sp = sa.shape_gate(sf, params).value
    assert 0.0 < float(w_sp) < 1.0


def test_saturated_gates_recover_residual_passthrough():
    """Large-magnitude gate weights drive both gates to ~1, leaving
    P_j + S_j(sf)."""
    rng = np.random.default_rng(5)
    params = sa.AttentionParams([4], out_channels=2, rng=rng)
    for name in ("level0.W1", "level0.W2", "shape_gate.W3", "shape_gate.W4"):
        params.store[name].value = np.full_like(params.store[name].value, 40.0)
    p0 = rng.uniform(0.5, 1.5, (4, 6, 6))  # positive features keep preactivations positive
    sf = sa.compute_shape_feature(rng.standard_normal((12, 12)))
    out = sa.recalibrate_level(p0, sf, params, 0)
    sf_resampled = nk.adaptive_avg_pool(sa.as_var(sf.stack()), 6, 6)
    shape_term = sa._project_1x1(sf_resampled, params.store["level0.S"])
    assert np.allclose(out.value, p0 + shape_term.value, atol=1e-6)


def test_bottleneck_ratio_must_divide():
    with pytest.raises(ValueError, match="ratio"):
        sa.AttentionParams([6], out_channels=2, ratio=4)


# ---------------------------------------------------------------------------
# aggregation


def test_single_level_zero_weight_gives_half():
    pyramid, sf, params = _pyramid_and_params(seed=2, channels=(4,), sizes=((6, 6),))
    params.store["level_weights"].value = np.zeros(1)
    out = sa.aggregate_pyramid([pyramid.levels[0]], params)
    assert np.all(out.value == 0.5)  # sigmoid(0) exactly


def test_aggregate_output_range_and_shape():
    pyramid, sf, params = _pyramid_and_params(seed=3)
    recal, fused = sa.run_block(pyramid, sf, params)
    assert fused.value.shape == (params.out_channels,) + pyramid.levels[0].shape[1:]
    assert np.all(fused.value > 0.0) and np.all(fused.value < 1.0)


def test_swapping_levels_with_their_params_is_invariant():
    rng = np.random.default_rng(4)
    levels = [rng.standard_normal((4, 6, 6)), rng.standard_normal((6, 6, 6))]
    params = sa.AttentionParams([4, 6], out_channels=3, rng=rng)
    out = sa.aggregate_pyramid(levels, params).value

    swapped = sa.AttentionParams([6, 4], out_channels=3, zero_init=True)
    for a, b in (("level0", "level1"), ("level1", "level0")):
        for suffix in ("W1", "W2", "S", "Q"):
            swapped.store[f"{b}.{suffix}"].value = params.store[f"{a}.{suffix}"].value.copy()
    swapped.store["shape_gate.W3"].value = params.store["shape_gate.W3"].value.copy()
    swapped.store["shape_gate.W4"].value = params.store["shape_gate.W4"].value.copy()
    swapped.store["level_weights"].value = params.store["level_weights"].value[::-1].copy()
    out_swapped = sa.aggregate_pyramid(levels[::-1], swapped).value
    assert np.array_equal(out, out_swapped)


def test_empty_levels_raise():
    _, _, params = _pyramid_and_params()
    with pytest.raises(nk.EmptySetError):
        sa.aggregate_pyramid([], params)


def test_pyramid_validation():
    with pytest.raises(ValueError, match="exceeds"):
        sa.FeaturePyramid(levels=[np.zeros((2, 4, 4)), np.zeros((2, 8, 8))])
    with pytest.raises(ValueError, match="non-finite"):
        sa.FeaturePyramid(levels=[np.full((1, 2, 2), np.nan)])


# ---------------------------------------------------------------------------
# gradients through the full block


def test_full_block_grad_check():
    """Finite-difference check w.r.t. every parameter, the level features,
    and the shape signal."""
    rng = np.random.default_rng(11)
    channels = [4, 4]
    levels = [rng.standard_normal((4, 6, 6)), rng.standard_normal((4, 3, 3))]
    image = rng.standard_normal((8, 8))
    sf = sa.compute_shape_feature(image)
    params = sa.AttentionParams(channels, out_channels=3, rng=rng)

    store = nk.ParamStore()
    p_vars = [store.add(f"input.P{j}", lvl) for j, lvl in enumerate(levels)]
    sf_var = store.add("input.sf", sf.stack())
    for name, p in params.store.items():
        store.add(name, p.value)
    view = params.with_store(store)

    def loss():
        recal = [sa.recalibrate_level(p_vars[j], sf_var, view, j) for j in range(2)]
        return nk.mean_all(nk.square(sa.aggregate_pyramid(recal, view)))

    report = nk.grad_check(loss, store, tol=1e-4)
    assert report.passed, report.summary()
