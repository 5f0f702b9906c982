import gc

import numpy as np
import pytest

from ctun import ops
from ctun.errors import DTypeError, GradientError, ShapeError
from ctun.gradcheck import grad_check
from ctun.tensor import Tensor, backward, make_result, meter, no_grad


def test_rejects_unsupported_dtype_and_rank():
    with pytest.raises(DTypeError):
        Tensor(np.zeros((2, 2), dtype=np.complex64))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_mixing_dtypes_is_an_error():
    a = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    b = Tensor(np.ones((1, 1, 2, 2), dtype=np.float64))
    with pytest.raises(DTypeError):
        ops.add(a, b)


def test_grad_of_sum_is_ones(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    backward(ops.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones_like(x.data))


def test_grad_of_sum_of_squares_is_two_x(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    backward(ops.sum_all(ops.mul(x, x)))
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_repeated_backward_accumulates(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    backward(ops.sum_all(x))
    backward(ops.sum_all(x))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_shared_subexpression_visited_once(rng):
    # y feeds two branches; a double visit would double-count through y
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    y = ops.mul_scalar(x, 3.0)
    backward(ops.sum_all(ops.add(y, y)))
    np.testing.assert_allclose(x.grad, 6 * np.ones_like(x.data))


def test_every_requires_grad_leaf_gets_a_grad(rng):
    a = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    unused = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    backward(ops.sum_all(ops.add(a, ops.mul_scalar(unused, 0.0))))
    assert a.grad is not None and unused.grad is not None


def test_non_scalar_loss_rejected(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ops.mul_scalar(x, 2.0))


def test_loss_without_graph_rejected():
    with pytest.raises(GradientError):
        backward(Tensor(np.ones(1)))


def test_no_grad_skips_graph(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with no_grad():
        y = ops.sigmoid(x)
    assert not y.requires_grad and y.is_leaf


def test_meter_refunds_exact_payload():
    gc.collect()
    before = meter.live_bytes
    t = Tensor(np.zeros((1, 3, 8, 8), dtype=np.float32))
    assert meter.live_bytes == before + 3 * 8 * 8 * 4
    del t
    gc.collect()
    assert meter.live_bytes == before
    assert meter.peak_bytes >= meter.live_bytes >= 0


def test_grad_check_quadratic_is_exact(rng):
    p = Tensor(rng.normal(size=(5,)), requires_grad=True)
    assert grad_check(lambda: ops.sum_all(ops.mul(p, p)), [p]) < 1e-9


def test_grad_check_conv_layernorm_sigmoid_chain(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.3, requires_grad=True)
    b = Tensor(rng.normal(size=(3,)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 1.5, size=(3,)), requires_grad=True)
    be = Tensor(rng.normal(size=(3,)), requires_grad=True)

    def f():
        return ops.sum_all(ops.sigmoid(ops.layer_norm(ops.conv2d(x, w, b, pad=1), g, be)))

    assert grad_check(f, [x, w, b, g, be]) < 1e-5


def test_grad_check_leaky_relu_away_from_kink(rng):
    raw = rng.normal(size=(1, 2, 4, 4))
    x = Tensor(np.where(raw >= 0, raw + 1e-3, raw - 1e-3), requires_grad=True)
    assert grad_check(lambda: ops.sum_all(ops.square(ops.leaky_relu(x))), [x]) < 1e-5


def test_grad_check_requires_float64():
    p = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(DTypeError):
        grad_check(lambda: ops.sum_all(p), [p])


@pytest.mark.filterwarnings("ignore:invalid value")
def test_grad_check_nan_is_an_error():
    p = Tensor(-np.ones(3), requires_grad=True)
    with pytest.raises(GradientError):
        grad_check(lambda: ops.sum_all(ops.sqrt(p)), [p])


def test_grad_check_detects_a_wrong_gradient(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)

    def f():
        # value of sum(x^2) but a deliberately wrong backward (x instead of 2x)
        return make_result(np.array([np.sum(x.data ** 2)]), (x,),
                           lambda g: (g * x.data,), "bad_square")

    assert grad_check(f, [x]) > 0.1


def test_grad_check_skips_kink_crossings():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    stats = {}
    err = grad_check(lambda: ops.sum_all(ops.relu(x)), [x], eps=1e-4, stats=stats)
    assert err < 1e-9
    assert stats == {"checked": 2, "skipped": 1}
