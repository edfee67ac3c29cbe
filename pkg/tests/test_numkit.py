"""Unit tests for the autodiff core: op semantics, gradient validity,
Adam behavior, and the checkpoint format."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disclab import numkit as nk


def _rand(shape, seed=0, scale=1.0):
    return scale * np.random.default_rng(seed).standard_normal(shape)


def _check(fn, store, tol=1e-4):
    report = nk.grad_check(fn, store, tol=tol)
    assert report.passed, report.summary()
    return report


# ---------------------------------------------------------------------------
# forward semantics


def test_affine_identity():
    y = nk.affine(np.array([[1.0, 2.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(y.value, [[1.0, 2.0]])


def test_affine_known_value():
    y = nk.affine(np.array([[1.0, 1.0]]), np.array([[2.0], [3.0]]), np.array([1.0]))
    assert np.array_equal(y.value, [[6.0]])


def test_affine_shape_mismatch_names_shapes():
    with pytest.raises(nk.DimensionError) as exc:
        nk.affine(np.ones((2, 3)), np.ones((4, 2)), np.zeros(2))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_activation_values():
    assert nk.sigmoid(np.array(0.0)).value == 0.5
    assert nk.relu(np.array(-3.2)).value == 0.0
    assert nk.relu(np.array(3.2)).value == 3.2
    assert np.allclose(nk.softmax_rows(np.array([[0.0, 0.0]])).value, [[0.5, 0.5]])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_softmax_rows_sum_to_one(seed):
    x = 30.0 * np.random.default_rng(seed).standard_normal((4, 6))
    s = nk.softmax_rows(x).value
    assert np.all(np.abs(s.sum(axis=1) - 1.0) < 1e-9)
    assert np.all(s > 0.0)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_sigmoid_open_interval(seed):
    # |x| capped below ~36.7, where float64 sigmoid saturates to exactly 1
    x = 30.0 * np.random.default_rng(seed).uniform(-1, 1, 100)
    s = nk.sigmoid(x).value
    assert np.all(s > 0.0) and np.all(s < 1.0)


def test_max_pool_set_basic():
    pooled, idx = nk.max_pool_set(np.array([[1.0, 5.0], [3.0, 2.0]]))
    assert np.array_equal(pooled.value, [3.0, 5.0])
    assert np.array_equal(idx, [1, 0])


def test_max_pool_set_single_row():
    pooled, _ = nk.max_pool_set(np.array([[7.0, -1.0, 2.0]]))
    assert np.array_equal(pooled.value, [7.0, -1.0, 2.0])


def test_max_pool_set_empty_raises():
    with pytest.raises(nk.EmptySetError):
        nk.max_pool_set(np.empty((0, 3)))


def test_max_pool_set_tie_routes_to_lowest_row():
    x = nk.Var(np.array([[1.0], [1.0], [0.5]]))
    pooled, idx = nk.max_pool_set(x)
    nk.backward(pooled)
    assert idx[0] == 0
    assert np.array_equal(x.grad, [[1.0], [0.0], [0.0]])


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_max_pool_set_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rng.integers(1, 12), 5))
    perm = rng.permutation(x.shape[0])
    a, _ = nk.max_pool_set(x)
    b, _ = nk.max_pool_set(x[perm])
    assert np.array_equal(a.value, b.value)


def test_forward_determinism_bitwise():
    x = _rand((5, 4), seed=3)
    w = _rand((4, 3), seed=4)
    one = nk.softmax_rows(nk.matmul(x, w)).value
    two = nk.softmax_rows(nk.matmul(x, w)).value
    assert np.array_equal(one, two)


def test_upsample_nearest_values():
    x = np.arange(4.0).reshape(1, 2, 2)
    up = nk.upsample_nearest(x, 4, 4).value
    assert np.array_equal(up[0, :2, :2], np.zeros((2, 2)))
    assert np.array_equal(up[0, 2:, 2:], np.full((2, 2), 3.0))


def test_adaptive_avg_pool_means():
    x = np.arange(16.0).reshape(1, 4, 4)
    pooled = nk.adaptive_avg_pool(x, 2, 2).value
    assert np.array_equal(pooled[0], [[2.5, 4.5], [10.5, 12.5]])


def test_segment_ops_match_per_set():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 4))
    seg, _ = nk.max_pool_set(x[:3])
    seg2, _ = nk.max_pool_set(x[3:])
    both = nk.segment_max_pool(x, 3).value
    assert np.array_equal(both, np.stack([seg.value, seg2.value]))
    tiled = nk.tile_rows(both, 3).value
    assert np.array_equal(tiled[0], tiled[2]) and np.array_equal(tiled[3], tiled[5])


def test_blockwise_matmul_matches_loop():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((6, 2))
    t = rng.standard_normal((2, 2, 3))
    out = nk.blockwise_matmul(x, t, 3).value
    expect = np.vstack([x[:3] @ t[0], x[3:] @ t[1]])
    assert np.allclose(out, expect)


# ---------------------------------------------------------------------------
# gradients


def test_grad_check_closed_form_sum_of_squares():
    store = nk.ParamStore()
    p = store.add("p", np.array([1.0, 2.0, 3.0]))

    def fn():
        return nk.sum_all(nk.square(p))

    report = nk.grad_check(fn, store, tol=1e-6)
    assert report.passed
    store.zero_grad()
    loss = fn()
    nk.backward(loss)
    assert np.allclose(p.grad, [2.0, 4.0, 6.0], atol=1e-12)


def test_grad_check_constant_function_passes():
    store = nk.ParamStore()
    store.add("p", np.array([1.0, -2.0]))

    def fn():
        return nk.Var(np.array(3.5))

    assert nk.grad_check(fn, store, tol=1e-6).passed


def test_grad_check_detects_corrupted_backward():
    store = nk.ParamStore()
    p = store.add("p", np.array([1.3, -0.4]))

    def fn():
        out = nk.Var((p.value**2).sum(), (p,))

        def _bad(g):
            nk._accum(p, 3.0 * p.value * g)  # should be 2 * p * g

        out._backward = _bad
        return out

    assert not nk.grad_check(fn, store, tol=1e-4).passed


def test_grad_check_nonfinite_loss_raises():
    store = nk.ParamStore()
    p = store.add("p", np.array([1.0]))

    def fn():
        return nk.Var(np.array(np.inf), (p,))

    with pytest.raises(nk.NonFiniteError):
        nk.grad_check(fn, store)


def test_affine_gradients_match_finite_differences():
    store = nk.ParamStore()
    x = store.add("x", _rand((3, 4), 1))
    w = store.add("w", _rand((4, 2), 2))
    b = store.add("b", _rand(2, 3))

    def fn():
        return nk.mean_all(nk.square(nk.affine(x, w, b)))

    _check(fn, store)


@pytest.mark.parametrize(
    "op",
    [
        lambda v: nk.relu(v),
        lambda v: nk.sigmoid(v),
        lambda v: nk.softmax_rows(v),
        lambda v: nk.max_pool_set(v)[0],
        lambda v: nk.mean_over(v, (0,)),
        lambda v: nk.transpose(nk.reshape(v, (4, 3)), (1, 0)),
        lambda v: nk.segment_max_pool(v, 2),
        lambda v: nk.tile_rows(v, 3),
    ],
    ids=["relu", "sigmoid", "softmax", "maxpool", "mean", "transpose", "segmaxpool", "tile"],
)
def test_layer_gradients(op):
    store = nk.ParamStore()
    # offset away from relu/max kinks so finite differences are clean
    v = store.add("v", _rand((4, 3), 7) * 1.7 + 0.05)

    def fn():
        return nk.mean_all(nk.square(op(v)))

    _check(fn, store)


def test_spatial_op_gradients():
    store = nk.ParamStore()
    x = store.add("x", _rand((2, 5, 4), 8))

    def up():
        return nk.mean_all(nk.square(nk.upsample_nearest(x, 8, 9)))

    def pool():
        return nk.mean_all(nk.square(nk.adaptive_avg_pool(x, 3, 2)))

    _check(up, store)
    _check(pool, store)


def test_concat_and_take_gradients():
    store = nk.ParamStore()
    local = store.add("local", _rand((4, 3), 9))
    pooled = store.add("pooled", _rand(3, 10))
    vec = store.add("vec", _rand(5, 11))

    def fn():
        cat = nk.concat_local_global(local, pooled)
        return nk.mul(nk.take(vec, 2), nk.mean_all(nk.square(cat)))

    _check(fn, store)


def test_blockwise_matmul_gradients():
    store = nk.ParamStore()
    x = store.add("x", _rand((6, 2), 12))
    t = store.add("t", _rand((3, 2, 2), 13))

    def fn():
        return nk.mean_all(nk.square(nk.blockwise_matmul(x, t, 2)))

    _check(fn, store)


def test_cross_entropy_gradients_and_value():
    store = nk.ParamStore()
    logits = store.add("logits", _rand((5, 2), 14))
    labels = np.array([0, 1, 1, 0, 1])
    weights = np.array([0.7, 1.4])

    def fn():
        return nk.softmax_cross_entropy(logits, labels, weights)

    _check(fn, store)
    # value agrees with a direct computation
    z = logits.value
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    expect = -(weights[labels] * np.log(p[np.arange(5), labels])).mean()
    assert abs(float(fn().value) - expect) < 1e-12


def test_gradient_accumulates_until_zeroed():
    store = nk.ParamStore()
    p = store.add("p", np.array([2.0]))

    def fn():
        return nk.sum_all(nk.square(p))

    nk.backward(fn())
    nk.backward(fn())
    assert np.allclose(p.grad, [8.0])  # two backward passes, no reset
    store.zero_grad()
    assert p.grad is None


# ---------------------------------------------------------------------------
# optimizer


def test_adam_zero_gradient_leaves_parameters():
    store = nk.ParamStore()
    p = store.add("p", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    before = p.value.copy()
    nk.adam_step(store, nk.OptimizerState(lr=0.1))
    assert np.array_equal(p.value, before)


def test_adam_first_step_magnitude():
    store = nk.ParamStore()
    p = store.add("p", np.array([1.0]))
    p.grad = np.array([1.0])
    nk.adam_step(store, nk.OptimizerState(lr=0.001))
    assert abs((1.0 - p.value[0]) - 0.001) < 1e-6


def test_adam_missing_gradient_names_parameter():
    store = nk.ParamStore()
    store.add("w.weird", np.array([1.0]))
    with pytest.raises(nk.MissingGradientError, match="w.weird"):
        nk.adam_step(store, nk.OptimizerState())


def test_lr_decay_schedule():
    opt = nk.OptimizerState(lr=1e-4, decay_factor=0.5, decay_period_epochs=20)
    opt.epoch = 0
    assert opt.effective_lr() == pytest.approx(1e-4)
    opt.epoch = 40
    assert opt.effective_lr() == pytest.approx(2.5e-5)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    store = nk.ParamStore()
    store.add("b.mat", _rand((3, 2), 20))
    store.add("a.vec", _rand(4, 21))
    arch = {"kind": "demo", "widths": [3, 2]}
    path = tmp_path / "ckpt.json"
    nk.save_checkpoint(path, store, arch)
    loaded, arch2 = nk.load_checkpoint(path)
    assert arch2 == arch
    for name in store.names():
        # storage is single precision
        assert np.array_equal(loaded[name].value, store[name].value.astype(np.float32))


def test_checkpoint_bytes_deterministic_and_sorted(tmp_path):
    store = nk.ParamStore()
    store.add("z", np.array([1.0]))
    store.add("a", np.array([2.0]))
    p1, p2 = tmp_path / "one.json", tmp_path / "two.json"
    nk.save_checkpoint(p1, store, {"kind": "demo"})
    nk.save_checkpoint(p2, store, {"kind": "demo"})
    assert p1.read_bytes() == p2.read_bytes()
    doc = json.loads(p1.read_text())
    assert [t["name"] for t in doc["tensors"]] == ["a", "z"]
    assert doc["format_version"] == 1


def test_checkpoint_rejects_unknown_version(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"format_version": 99, "architecture": {}, "tensors": []}))
    with pytest.raises(ValueError, match="format_version"):
        nk.load_checkpoint(path)
