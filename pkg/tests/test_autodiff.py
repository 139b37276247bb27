import numpy as np
import pytest

from aplnet import autodiff as ad
from aplnet.autodiff import OracleError, Tensor, backward, finite_diff_check, parameter
from aplnet.functional import ShapeError

from oracles import central_diff


def test_linear_sum():
    w = parameter([2.0, 3.0], "w")
    x = Tensor([1.0, 1.0])
    grads = backward(ad.sum(w * x), [w])
    np.testing.assert_array_equal(grads["w"], [1.0, 1.0])


def test_relu_gate():
    x = parameter([-1.0, 2.0], "x")
    grads = backward(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(grads["x"], [0.0, 1.0])


def test_apl_input_gradient():
    x = parameter([[-2.0]], "x")
    a = parameter([[0.5]], "a")
    b = parameter([[0.0]], "b")
    grads = backward(ad.sum(ad.apl(x, a, b)), [x, a, b])
    assert grads["x"][0, 0] == -0.5

    def f(v):
        return float(ad.sum(ad.apl(Tensor(v.reshape(1, 1)), a, b)).data[0])

    assert central_diff(f, np.array([-2.0]))[0] == pytest.approx(-0.5, abs=1e-9)


def test_non_scalar_loss():
    x = parameter([1.0, 2.0], "x")
    with pytest.raises(ShapeError):
        backward(ad.relu(x), [x])


def test_unused_parameter_gets_zeros():
    x = parameter([1.0, 2.0], "x")
    unused = parameter(np.ones((2, 3)), "unused")
    grads = backward(ad.sum(x), [x, unused])
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 3)))


def test_fan_out_accumulates():
    x = parameter([0.3, -1.2, 2.0], "x")
    single = backward(ad.sum(ad.scale(x, 1.7)), [x])["x"].copy()
    y = ad.scale(x, 1.7)
    fan = ad.sum(y + y + y + y)
    np.testing.assert_allclose(backward(fan, [x])["x"], 4 * single)


def test_repeat_backward_identical():
    rng = np.random.default_rng(0)
    w = parameter(rng.normal(size=(3, 4)), "w")
    x = Tensor(rng.normal(size=(5, 3)))
    loss = ad.softmax_xent(x @ w, [0, 1, 2, 3, 0])
    g1 = {k: v.copy() for k, v in backward(loss, [w]).items()}
    g2 = backward(loss, [w])
    np.testing.assert_array_equal(g1["w"], g2["w"])


def test_cycle_detected():
    x = parameter([1.0], "x")
    y = ad.scale(x, 2.0)
    x._parents = (y,)  # corrupt the tape on purpose
    x._backward = lambda g: (g,)
    with pytest.raises(RuntimeError, match="cycle"):
        backward(ad.sum(y), [])


def _check_op(build, shapes, seed=0, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    values = [rng.normal(size=s) for s in shapes]
    params = [parameter(v, f"p{i}") for i, v in enumerate(values)]
    grads = backward(build(*params), params)
    for i, v in enumerate(values):
        def f(vi, i=i):
            ts = [Tensor(vi if j == i else values[j]) for j in range(len(values))]
            return float(build(*ts).data[0])
        num = central_diff(f, v, h)
        err = np.abs(grads[f"p{i}"] - num) / np.maximum(1, np.abs(grads[f"p{i}"]) + np.abs(num))
        assert err.max() <= tol, (i, err.max())


def test_matmul_add_grad():
    _check_op(lambda x, w, b: ad.sum(ad.scale(ad.dense(x, w, b), 0.3) * ad.dense(x, w, b)),
              [(4, 3), (3, 5), (5,)])


def test_softmax_xent_grad():
    labels = [2, 0, 1, 1]
    _check_op(lambda z: ad.softmax_xent(z, labels), [(4, 3)])


def test_mse_grad():
    target = np.arange(6.0).reshape(2, 3)
    _check_op(lambda z: ad.mse(z, target), [(2, 3)])


def test_conv_pool_grad():
    def build(x, w, b):
        h = ad.conv2d(x, w, b, stride=1, pad=1)
        h = ad.maxpool2d(h, 2, 2)
        h = ad.avgpool2d(h, 2, 1)
        return ad.sum(h * h)
    _check_op(build, [(2, 2, 6, 6), (3, 2, 3, 3), (3,)])


def test_conv_strided_grad():
    _check_op(lambda x, w, b: ad.sum(ad.scale(ad.conv2d(x, w, b, stride=2, pad=2), 1.0) *
                                     ad.conv2d(x, w, b, stride=2, pad=2)),
              [(1, 2, 7, 7), (2, 2, 5, 5), (2,)], seed=3)


def test_apl_leaky_maxout_grad():
    def build(x, a, b):
        h = ad.apl(x, a, b)
        h = ad.leaky_relu(h, 0.1)
        h = ad.maxout(h, 2)
        return ad.sum(h * h)
    _check_op(build, [(5, 4), (4, 3), (4, 3)], seed=4)


def test_apl_conv_shared_grad():
    _check_op(lambda x, a, b: ad.sum(ad.apl(x, a, b) * ad.apl(x, a, b)),
              [(2, 3, 4, 4), (3, 2), (3, 2)], seed=5)


def test_dropout_grad():
    mask = np.array([[2.0, 0.0, 2.0]])
    x = parameter([[1.0, 2.0, 3.0]], "x")
    np.testing.assert_array_equal(backward(ad.sum(ad.dropout(x, mask)), [x])["x"], mask)


# -- finite_diff_check ---------------------------------------------------------------------

def test_fd_quadratic():
    theta = np.array([1.0, 2.0])
    res = finite_diff_check(lambda t: float(np.sum(t ** 2)), theta, 2 * theta, h=1e-5)
    assert res.max_rel_error <= 1e-9
    assert res.n_excluded == 0


def test_fd_excludes_coordinate_at_hinge():
    theta = np.array([0.0, 1.0, 2.0])

    def f(t):
        return float(np.sum(np.maximum(t, 0)))

    res = finite_diff_check(f, theta, (theta > 0).astype(float), kink_distances=lambda t: t)
    assert res.n_excluded == 1
    assert res.excluded == [0]
    assert res.max_rel_error <= 1e-9
    assert res.excluded_max_rel_error > 0.1


def test_fd_nonfinite():
    with pytest.raises(OracleError), np.errstate(invalid="ignore", divide="ignore"):
        finite_diff_check(lambda t: float(np.log(t[0])), np.array([0.0]), np.array([1.0]))


def test_fd_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda t: 0.0, np.zeros(1), np.zeros(1), h=0.0)
