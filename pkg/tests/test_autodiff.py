import numpy as np
import pytest
from hypothesis import given, strategies as st

from spikesfp import autodiff as ad
from spikesfp.autodiff import DimensionError, StaleTapeError, Tensor

from helpers import naive_conv, naive_pool, numeric_grad


def T(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- conv2d --------------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.normal(size=(3, 5, 6))
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1
    assert np.array_equal(ad.conv2d(T(x), T(w)).data, x)


def test_conv_impulse_response():
    x = np.zeros((1, 5, 5))
    x[0, 0, 2] = 1
    out = ad.conv2d(T(x), T(np.ones((1, 1, 3, 3)))).data[0]
    expected = np.zeros((5, 5))
    expected[0:2, 1:4] = 1  # 3x3 block clipped at the top border
    assert np.array_equal(out, expected)


def test_conv_matches_naive_loops(rng):
    x = rng.normal(size=(2, 8, 8)).astype(np.float32)
    w = rng.normal(size=(3, 2, 3, 3)).astype(np.float32)
    b = rng.normal(size=3).astype(np.float32)
    got = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.abs(got - naive_conv(x.astype(float), w.astype(float), b.astype(float))).max() <= 1e-5


def test_conv_batched_leading_axes(rng):
    x = rng.normal(size=(2, 3, 2, 6, 6))
    w = rng.normal(size=(4, 2, 3, 3))
    out = ad.conv2d(T(x), T(w)).data
    assert out.shape == (2, 3, 4, 6, 6)
    assert np.allclose(out[1, 2], naive_conv(x[1, 2], w), atol=1e-10)


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        ad.conv2d(T(np.zeros((2, 4, 4))), T(np.zeros((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ad.conv2d(T(np.zeros((2, 4, 4))), T(np.zeros((1, 2, 2, 2))))


@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 2, 6, 6))
    w = T(r.normal(size=(3, 2, 3, 3)))
    lhs = ad.conv2d(T(a * x + b * y), w).data
    rhs = a * ad.conv2d(T(x), w).data + b * ad.conv2d(T(y), w).data
    assert np.abs(lhs - rhs).max() <= 1e-5


def test_conv_gradients(rng):
    x = rng.normal(size=(2, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 5, 5))
    tx, tw, tb = T(x), T(w), T(b)
    ad.backward((ad.conv2d(tx, tw, tb) * r).sum())

    def f():
        return float((ad.conv2d(T(x, False), T(w, False), T(b, False)).data * r).sum())

    for t, arr in ((tx, x), (tw, w), (tb, b)):
        assert np.allclose(t.grad, numeric_grad(f, arr), atol=1e-7)


# --- pooling / upsampling ----------------------------------------------------------

def test_pool_constant():
    assert np.array_equal(ad.max_pool2(T(np.full((2, 4, 6), 3.0))).data, np.full((2, 2, 3), 3.0))


def test_pool_routes_gradient_to_argmax():
    x = T([[[0.0, 1.0], [0.0, 0.0]]])
    out = ad.max_pool2(x)
    assert out.data.item() == 1
    ad.backward(out.sum())
    assert np.array_equal(x.grad, [[[0, 1], [0, 0]]])


def test_pool_ties_go_to_first_cell():
    x = T(np.ones((1, 2, 2)))
    ad.backward(ad.max_pool2(x).sum())
    assert np.array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_pool_matches_naive(rng):
    x = rng.normal(size=(3, 6, 8))
    assert np.array_equal(ad.max_pool2(T(x)).data, naive_pool(x))


def test_pool_odd_extent():
    with pytest.raises(DimensionError):
        ad.max_pool2(T(np.zeros((1, 3, 4))))


def test_nearest_preserves_binary(rng):
    x = (rng.random((2, 3, 4)) > 0.5).astype(float)
    out = ad.upsample2(T(x), "nearest").data
    assert out.shape == (2, 6, 8) and set(np.unique(out)) <= {0.0, 1.0}


def test_bilinear_constant():
    assert np.allclose(ad.upsample2(T(np.full((1, 3, 5), 2.5)), "bilinear").data, 2.5, atol=1e-15)


def _bilinear_1d(v):
    """align_corners=False closed form: out[i] samples source (i + 0.5) / 2 - 0.5, clamped."""
    n = len(v)
    out = []
    for i in range(2 * n):
        s = min(max((i + 0.5) / 2 - 0.5, 0), n - 1)
        lo = int(np.floor(s))
        hi = min(lo + 1, n - 1)
        out.append(v[lo] * (1 - (s - lo)) + v[hi] * (s - lo))
    return np.array(out)


def test_bilinear_ramp_closed_form():
    ramp = np.add.outer(np.arange(4.0), 10 * np.arange(5.0))
    out = ad.upsample2(T(ramp[None]), "bilinear").data[0]
    rows = np.array([_bilinear_1d(r) for r in ramp])
    expected = np.array([_bilinear_1d(c) for c in rows.T]).T
    assert np.allclose(out, expected, atol=1e-12)
    # interior of a linear ramp is reproduced exactly by the interpolation
    assert out[3, 3] == pytest.approx((3 + 0.5) / 2 - 0.5 + 10 * ((3 + 0.5) / 2 - 0.5))


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_upsample_gradients(rng, mode):
    x = rng.normal(size=(2, 3, 4))
    r = rng.normal(size=(2, 6, 8))
    tx = T(x)
    ad.backward((ad.upsample2(tx, mode) * r).sum())
    num = numeric_grad(lambda: float((ad.upsample2(T(x, False), mode).data * r).sum()), x)
    assert np.allclose(tx.grad, num, atol=1e-7)


@given(st.integers(0, 2**31))
def test_nearest_then_pool_is_identity(seed):
    x = np.random.default_rng(seed).normal(size=(2, 3, 5))
    assert np.array_equal(ad.max_pool2(ad.upsample2(T(x), "nearest")).data, x)


# --- concatenation ------------------------------------------------------------------

def test_concat_with_empty(rng):
    x = rng.normal(size=(3, 4, 4))
    assert np.array_equal(ad.concat_channels(T(x), T(np.zeros((0, 4, 4)))).data, x)


def test_concat_shapes_and_slice_back(rng):
    a, b = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 4, 5))
    out = ad.concat_channels(T(a), T(b)).data
    assert out.shape == (8, 4, 5)
    assert np.array_equal(out[:3], a) and np.array_equal(out[3:], b)


def test_concat_splits_gradient(rng):
    a, b = T(rng.normal(size=(1, 2, 2, 2))), T(rng.normal(size=(1, 3, 2, 2)))
    r = rng.normal(size=(1, 5, 2, 2))
    ad.backward((ad.concat_channels(a, b) * r).sum())
    assert np.array_equal(a.grad, r[:, :2]) and np.array_equal(b.grad, r[:, 2:])


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        ad.concat_channels(T(np.zeros((1, 4, 4))), T(np.zeros((1, 4, 2))))


# --- channel norm -----------------------------------------------------------------

def _norm(x, **kw):
    c = x.shape[-3]
    return ad.channel_norm(T(x), T(np.ones(c)), T(np.zeros(c)), **kw)


def test_norm_constant_channel_is_zero():
    out, _, _ = _norm(np.full((2, 3, 4, 4), 7.0))
    assert np.allclose(out.data, 0, atol=1e-12)


def test_norm_fixed_point(rng):
    x = rng.normal(size=(4, 2, 8, 8))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out, _, _ = _norm(x, eps=1e-12)
    assert np.abs(out.data - x).max() <= 1e-5


def test_norm_moments(rng):
    x = 3 + 5 * rng.normal(size=(3, 4, 6, 6))
    out, m, v = _norm(x)
    y = out.data
    assert np.abs(y.mean(axis=(0, 2, 3))).max() <= 1e-5
    assert np.abs(y.var(axis=(0, 2, 3)) - 1).max() <= 1e-3
    assert np.allclose(m, x.mean(axis=(0, 2, 3))) and np.allclose(v, x.var(axis=(0, 2, 3)))


def test_norm_eval_uses_supplied_stats(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    out, m, v = _norm(x, stats=(np.full(3, 1.0), np.full(3, 4.0)), eps=1e-5)
    assert m is None and np.allclose(out.data, (x - 1) / np.sqrt(4 + 1e-5))


def test_norm_per_step_statistics(rng):
    x = rng.normal(size=(3, 2, 2, 4, 4)) + np.arange(3)[:, None, None, None, None] * 10
    out, _, _ = _norm(x, per_step=True)
    assert np.abs(out.data.mean(axis=(1, 3, 4))).max() <= 1e-6


@pytest.mark.parametrize("per_step", [False, True])
def test_norm_gradients(rng, per_step):
    x = rng.normal(size=(2, 2, 3, 4, 4))
    g, b = rng.normal(size=3), rng.normal(size=3)
    r = rng.normal(size=x.shape)
    tx, tg, tb = T(x), T(g), T(b)
    out, _, _ = ad.channel_norm(tx, tg, tb, per_step=per_step)
    ad.backward((out * r).sum())

    def f():
        o, _, _ = ad.channel_norm(T(x, False), T(g, False), T(b, False), per_step=per_step)
        return float((o.data * r).sum())

    for t, arr in ((tx, x), (tg, g), (tb, b)):
        assert np.allclose(t.grad, numeric_grad(f, arr), atol=1e-6)


# --- tape semantics -------------------------------------------------------------------

def test_linear_gradient_exact(rng):
    x = rng.normal(size=5)
    w = T(rng.normal(size=5))
    ad.backward((w * x).sum())
    assert np.array_equal(w.grad, x)


def test_unrolled_accumulator_sums_timesteps():
    w = T(0.3)
    x1, x2 = 2.0, -5.0
    u1 = w * x1
    u2 = u1 + w * x2
    ad.backward(u2)
    assert w.grad == pytest.approx(x1 + x2)


def test_fan_out_accumulates():
    a = T(1.5)
    ad.backward(a * a + a)
    assert a.grad == pytest.approx(2 * 1.5 + 1)


def test_second_backward_is_stale():
    w = T(1.0)
    loss = w * 3.0
    ad.backward(loss)
    with pytest.raises(StaleTapeError):
        ad.backward(loss)


def test_backward_requires_scalar():
    w = T(np.ones(3))
    with pytest.raises(DimensionError):
        ad.backward(w * 2.0)


def test_no_grad_records_nothing():
    w = T(2.0)
    with ad.no_grad():
        y = w * 3.0
    assert y.requires_grad is False


def test_tape_cleared_after_backward():
    w = T(2.0)
    loss = (w * w).sum()
    tape = loss._tape
    assert len(tape) > 0
    ad.backward(loss)
    assert len(tape) == 0


@given(st.integers(0, 2**31))
def test_composite_graph_gradients(seed):
    """Elementwise ops, reductions and the smooth spike agree with finite differences."""
    r = np.random.default_rng(seed)
    x = r.normal(size=(2, 3))
    w = r.normal(size=(2, 3))

    def build(tx, tw):
        a = ad.sigmoid(tx * tw) + ad.arctan(tw) / (1.5 + tx * tx)
        b = ad.spike(a - 0.3, smooth=True) * ad.sqrt(tw * tw + 1.0)
        return (b ** 2).sum() - (a[0] * b[1]).mean()

    tx, tw = T(x), T(w)
    ad.backward(build(tx, tw))
    f = lambda: float(build(T(x, False), T(w, False)).data)  # noqa: E731
    assert np.allclose(tx.grad, numeric_grad(f, x), atol=1e-6)
    assert np.allclose(tw.grad, numeric_grad(f, w), atol=1e-6)


def test_spike_forward_is_heaviside_backward_is_arctan():
    x = T([-1.0, 0.0, 0.5])
    out = ad.spike(x)
    assert np.array_equal(out.data, [0, 1, 1])
    ad.backward(out.sum())
    assert np.allclose(x.grad, 1 / (1 + (np.pi * x.data) ** 2))


def test_float32_default():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64
