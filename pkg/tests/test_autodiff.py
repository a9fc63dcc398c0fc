import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradsense import autodiff as ad
from gradsense import kernels

from conftest import central_diff, max_rel_err


def test_evaluate_scalar_square():
    x = ad.Variable(3.0)
    assert ad.evaluate(x * x) == 9.0


def test_evaluate_identity_reshape():
    a = np.arange(4.0).reshape(2, 2)
    out = ad.evaluate(ad.reshape(ad.Variable(a), (2, 2)))
    assert np.array_equal(out, a)


def test_sigmoid_zero():
    assert ad.evaluate(ad.sigmoid(ad.Variable(0.0))) == 0.5


def test_evaluate_repeatable_and_tracks_leaf_updates():
    x = ad.Variable([1.0, 2.0])
    f = ad.sum(ad.exp(x) * x)
    first = ad.evaluate(f).copy()
    assert np.array_equal(ad.evaluate(f), first)
    x.data = np.array([0.0, 0.0])
    assert ad.evaluate(f) == 0.0


def test_evaluate_reports_nonfinite_op():
    x = ad.Variable([800.0])
    f = ad.exp(x)
    with pytest.raises(ad.NonFiniteError) as info:
        ad.evaluate(f)
    assert info.value.op == "exp"


def test_shape_mismatch_is_construction_error():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.Variable(np.ones(3)), ad.Variable(np.ones(4)))
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Variable(np.ones((2, 3))), ad.Variable(np.ones((2, 3))))


def test_first_and_second_derivative():
    x = ad.Variable(3.0)
    f = x * x
    (g,) = ad.differentiate(f, [x], create_graph=True)
    assert g.item() == 6.0
    (h,) = ad.differentiate(g, [x])
    assert h.item() == 2.0


def test_detached_when_not_creating_graph():
    x = ad.Variable(2.0)
    (g,) = ad.differentiate(x * x * x, [x])
    assert g.inputs == ()
    assert g.item() == 12.0
    (gg,) = ad.differentiate(ad.sum(g), [x])
    assert gg.item() == 0.0


def test_non_scalar_output_rejected():
    x = ad.Variable(np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.differentiate(x * x, [x])


def test_unreachable_variable_gets_zero():
    x, y = ad.Variable(np.ones(2)), ad.Variable(np.ones((3, 1)))
    gx, gy = ad.differentiate(ad.sum(x * x), [x, y])
    assert np.array_equal(gx.value, [2.0, 2.0])
    assert gy.shape == (3, 1) and not gy.value.any()


def test_backward_accumulates_and_zero_grad():
    x = ad.Variable([1.0, -2.0])
    f = ad.sum(x * x)
    ad.backward(f, [x])
    ad.backward(f, [x])
    assert np.array_equal(x.grad, [4.0, -8.0])
    assert x.grad.shape == x.data.shape
    x.zero_grad()
    assert not x.grad.any()


def test_variable_data_shape_guard():
    x = ad.Variable(np.zeros((2, 2)))
    with pytest.raises(ad.ShapeError):
        x.data = np.zeros(4)


def test_grad_norm_linear_model_matches_fd():
    # ||grad_theta L(theta; x)||^2 with L = (w.x + b)^2 / 2, differentiated w.r.t. x
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=2)
    b0 = 0.3

    def value(xv, create_graph=False):
        w, b = ad.Variable(w0), ad.Variable(b0)
        x = ad.Variable(xv)
        r = ad.add(ad.sum(w * x), b)
        loss = ad.scale(r * r, 0.5)
        gw, gb = ad.differentiate(loss, [w, b], create_graph=True)
        out = ad.add(ad.sum(gw * gw), ad.sum(gb * gb))
        return x, out

    x0 = rng.normal(size=2)
    x, out = value(x0)
    (gx,) = ad.differentiate(out, [x])
    fd = central_diff(lambda v: value(v)[1].item(), x0)
    assert max_rel_err(gx.value, fd) < 1e-6


def _random_graph(seed, x):
    """A scalar built from most supported ops."""
    rng = np.random.default_rng(seed)
    W = ad.constant(rng.normal(size=(3, 4)) * 0.5)
    h = ad.sigmoid(ad.matmul(W, ad.reshape(x, (4, 1))))
    z = ad.add(ad.reshape(h, (1, 3)), ad.constant(rng.normal(size=(1, 3))))
    ls = ad.log_softmax(z)
    p = ad.power(ad.add(ad.mul(x, x), 1.0), 1.5)
    r = ad.relu(ad.sub(x, 0.1))
    return ad.add(ad.add(ad.sum(ls * ad.softmax(z)), ad.scale(ad.sum(p), 0.1)), ad.sum(ad.exp(ad.scale(r, 0.3))))


@pytest.mark.parametrize("seed", range(100))
def test_double_differentiation_matches_fd_of_first_gradient(seed):
    rng = np.random.default_rng(1000 + seed)
    x0 = rng.normal(size=4)
    v = rng.normal(size=4)

    def first(xv):
        x = ad.Variable(xv)
        (g,) = ad.differentiate(_random_graph(seed, x), [x], create_graph=True)
        return x, g

    # gradient of v . grad f, i.e. a Hessian-vector product
    x, g = first(x0)
    (hv,) = ad.differentiate(ad.sum(ad.mul(g, v)), [x])
    fd = central_diff(lambda xv: float(np.dot(first(xv)[1].value, v)), x0)
    # relu kinks make fd unreliable right at the kink
    if np.min(np.abs(x0 - 0.1)) < 1e-3:
        pytest.skip("probe sits on a relu kink")
    assert max_rel_err(hv.value, fd) < 1e-4


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31 - 1))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    x = ad.Variable(rng.normal(size=5))
    f = ad.sum(ad.sigmoid(x) * x)
    g = ad.sum(ad.exp(ad.scale(x, 0.5)))
    (lhs,) = ad.differentiate(ad.add(ad.scale(f, a), ad.scale(g, b)), [x])
    (df,) = ad.differentiate(f, [x])
    (dg,) = ad.differentiate(g, [x])
    rhs = a * df.value + b * dg.value
    assert np.allclose(lhs.value, rhs, rtol=1e-12, atol=1e-12 * (1 + np.abs(rhs).max()))


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = ad.Variable(rng.normal(size=(2, 1, 6, 6)))
        w = ad.Variable(rng.normal(size=(3, 1, 3, 3)))
        y = ad.sum(ad.sigmoid(ad.conv2d(x, w, None, 1)))
        gx, gw = ad.differentiate(y, [x, w], create_graph=True)
        (hx,) = ad.differentiate(ad.sum(gw * gw), [x])
        return gx.value, hx.value

    a, b = run(), run()
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


def test_broadcast_gradients_sum_back():
    a = ad.Variable(np.ones((3, 4)))
    b = ad.Variable(np.arange(4.0))
    ga, gb = ad.differentiate(ad.sum(ad.mul(a, b)), [a, b])
    assert ga.shape == (3, 4) and gb.shape == (4,)
    assert np.array_equal(gb.value, [3.0, 3.0, 3.0, 3.0])


def test_getitem_and_scatter_fd():
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(4, 3))
    idx = np.array([0, 2])

    def f(xv):
        x = ad.Variable(xv)
        sel = ad.getitem(x, idx)
        return x, ad.sum(ad.exp(sel) * sel)

    x, y = f(x0)
    (g,) = ad.differentiate(y, [x])
    assert max_rel_err(g.value, central_diff(lambda v: f(v)[1].item(), x0)) < 1e-8
    assert not g.value[[1, 3]].any()


def test_concat_and_transpose_fd():
    rng = np.random.default_rng(3)
    a0, b0 = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))

    def f(av):
        a = ad.Variable(av)
        c = ad.concat([a, ad.constant(b0)], axis=1)
        return a, ad.sum(ad.matmul(c, ad.transpose(c)) ** 2)

    a, y = f(a0)
    (g,) = ad.differentiate(y, [a])
    assert max_rel_err(g.value, central_diff(lambda v: f(v)[1].item(), a0)) < 1e-7


@pytest.mark.parametrize("stride", [1, 2])
def test_conv2d_matches_direct_loop(stride):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 7, 7))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), stride).value
    oh = (7 - 3) // stride + 1
    ref = np.zeros((2, 3, oh, oh))
    for n in range(2):
        for o in range(3):
            for i in range(oh):
                for j in range(oh):
                    patch = x[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_second_order_fd():
    rng = np.random.default_rng(6)
    x0 = rng.uniform(size=(1, 1, 6, 6))
    w0 = rng.normal(size=(2, 1, 3, 3)) * 0.3

    def f(xv):
        x, w = ad.Variable(xv), ad.Variable(w0)
        y = ad.sum(ad.sigmoid(ad.conv2d(x, w, None, 2)))
        (gw,) = ad.differentiate(y, [w], create_graph=True)
        return x, ad.sum(gw * gw)

    x, y = f(x0)
    (g,) = ad.differentiate(y, [x])
    assert max_rel_err(g.value, central_diff(lambda v: f(v)[1].item(), x0)) < 1e-6


def test_im2col_col2im_adjoint():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 9, 8))
    cols = kernels.im2col(x, 3, 2)
    c = rng.normal(size=cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * kernels.col2im(c, 3, 9, 8, 3, 2))
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


def test_no_grad_context():
    x = ad.Variable(2.0)
    with ad.no_grad():
        y = x * x
    assert y.inputs == () and y.item() == 4.0
