import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from dcsep import tensor as T
from dcsep.errors import InvalidDimension, NonFiniteValue, NonScalarLoss, ShapeError, TapeReuse
from dcsep.gradcheck import finite_difference_check
from dcsep.selftest import ZERO_TOL


def grad_of(fn, *arrays_in):
    ts = [T.Tensor(a, requires_grad=True) for a in arrays_in]
    with T.Tape() as tape:
        out = fn(*ts)
    T.backward(tape, out)
    return [t.grad for t in ts]


def naive_conv(x, k, pad):
    n, c, h, w = x.shape
    o, _, kk, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = xp.shape[2] - kk + 1, xp.shape[3] - kk + 1
    out = np.zeros((n, o, oh, ow))
    for b, f, i, j in itertools.product(range(n), range(o), range(oh), range(ow)):
        out[b, f, i, j] = np.sum(xp[b, :, i:i + kk, j:j + kk] * k[f])
    return out


# tensor basics --------------------------------------------------------------

def test_default_dtype_is_float32():
    assert T.Tensor([1.0, 2.0]).dtype == np.float32


def test_precision_switches_default_dtype():
    with T.precision(np.float64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


def test_zero_size_dimension_rejected():
    with pytest.raises(InvalidDimension):
        T.Tensor(np.zeros((0, 3)))


def test_node_ids_unique():
    a, b = T.Tensor(1.0), T.Tensor(1.0)
    assert a.node_id != b.node_id


def test_no_recording_outside_tape():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.square(x)
    assert not y.requires_grad


# forward examples -----------------------------------------------------------

def test_relu_forward():
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_conv_center_of_ones_is_nine():
    x = T.Tensor(np.ones((1, 1, 3, 3)))
    k = T.Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k, padding=1)
    assert out.data[0, 0, 1, 1] == 9.0
    # corners see a 2x2 patch of the zero-padded input
    assert out.data[0, 0, 0, 0] == 4.0


def test_conv_same_padding_preserves_28x28():
    x = T.Tensor(np.zeros((2, 1, 28, 28)))
    k = T.Tensor(np.zeros((4, 1, 3, 3)))
    assert T.conv2d(x, k, padding=1).shape == (2, 4, 28, 28)


def test_conv_matches_naive_loop(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    with T.precision(np.float64):
        out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), padding=1).data
    np.testing.assert_allclose(out, naive_conv(x, k, 1) + b[None, :, None, None], atol=1e-12)


def test_conv_stride_two_shape():
    x = T.Tensor(np.zeros((1, 1, 7, 7)))
    k = T.Tensor(np.zeros((1, 1, 3, 3)))
    assert T.conv2d(x, k, stride=2, padding=1).shape == (1, 1, 4, 4)


def test_conv_transpose_is_adjoint_of_conv(rng):
    # <conv(x), y> == <x, conv_T(y)> with the same kernel and geometry
    x = rng.normal(size=(2, 3, 7, 7))
    k = rng.normal(size=(4, 3, 3, 3))
    with T.precision(np.float64):
        y_shape = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).shape
        y = rng.normal(size=y_shape)
        lhs = np.sum(T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).data * y)
        xt = T.conv_transpose2d(T.Tensor(y), T.Tensor(k), stride=2, padding=1).data
    assert xt.shape == x.shape
    assert lhs == pytest.approx(np.sum(x * xt), rel=1e-12)


@pytest.mark.parametrize("size", [28, 14, 7, 4, 2, 16, 8, 5, 3, 32])
def test_pool_then_deconv_restores_size(size):
    pooled = T.pool_output_size(size, 2, 2)
    out_pad = size - (2 * pooled - 1)
    x = T.Tensor(np.zeros((1, 2, pooled, pooled)))
    k = T.Tensor(np.zeros((2, 2, 3, 3)))
    out = T.conv_transpose2d(x, k, stride=2, padding=1, output_padding=out_pad)
    assert out.shape[2:] == (size, size)


def test_maxpool_ceil_padding_and_values():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    out = T.maxpool2d(T.Tensor(x)).data
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[5.0, 6.0], [8.0, 9.0]]


def test_maxpool_gradient_goes_to_first_maximum_on_ties():
    x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_(T.maxpool2d(x))
    T.backward(tape, y)
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_batch_norm_train_mode_standardizes(rng):
    x = rng.normal(3.0, 2.0, size=(8, 4, 5, 5))
    with T.precision(np.float64):
        out = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(4)), T.Tensor(np.zeros(4))).data
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-4
    assert np.abs(out.var(axis=(0, 2, 3)) - 1).max() < 1e-3


def test_batch_norm_running_stats_momentum():
    stats = T.RunningStats(2, momentum=0.9, dtype=np.float64)
    x = np.array([[1.0, 10.0], [3.0, 30.0]])
    T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), stats=stats)
    # running = 0.9 * running + 0.1 * batch, starting from mean 0 / var 1
    np.testing.assert_allclose(stats.mean, [0.2, 2.0])
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * np.array([1.0, 100.0]))


def test_batch_norm_eval_uses_running_stats():
    stats = T.RunningStats(1, dtype=np.float64)
    stats.mean[:] = 2.0
    stats.var[:] = 4.0
    out = T.batch_norm(T.Tensor(np.array([[4.0]])), T.Tensor(np.ones(1)),
                       T.Tensor(np.zeros(1)), mode="eval", stats=stats, eps=0.0)
    assert out.data[0, 0] == pytest.approx(1.0)


def test_l2_sq_distance_rows():
    a = T.Tensor([[0.0, 0.0], [1.0, 1.0]])
    b = T.Tensor([[3.0, 4.0], [1.0, 1.0]])
    assert T.l2_sq_distance(a, b).data.tolist() == [25.0, 0.0]


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 5))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_broadcast_mismatch_is_shape_error():
    with pytest.raises(ShapeError):
        T.add(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_from_finite_input_raises():
    with pytest.raises(NonFiniteValue):
        T.reciprocal(T.Tensor([0.0]))


# backward -------------------------------------------------------------------

def test_sum_of_squares_gradient():
    (g,) = grad_of(lambda x: T.sum_(T.square(x)), np.array([1.0, 2.0, 3.0]))
    assert g.tolist() == [2.0, 4.0, 6.0]


def test_relu_gradient_on_negative_is_zero():
    (g,) = grad_of(lambda x: T.sum_(T.relu(x)), np.array([-5.0]))
    assert g.tolist() == [0.0]


def test_non_scalar_loss_rejected():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.square(x)
    with pytest.raises(NonScalarLoss):
        T.backward(tape, y)


def test_tape_consumed_once():
    x = T.Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_(T.square(x))
    T.backward(tape, y)
    with pytest.raises(TapeReuse):
        T.backward(tape, y)


def test_unreachable_parameter_gets_zero_grad():
    x = T.Tensor([1.0], requires_grad=True)
    unused = T.Tensor([[1.0, 2.0]], requires_grad=True)
    with T.Tape() as tape:
        y = T.sum_(T.square(x))
    T.backward(tape, y, params=[x, unused])
    assert unused.grad.tolist() == [[0.0, 0.0]]


def test_tape_records_inputs_before_outputs():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        T.sum_(T.relu(T.mul(x, 2.0)))
    seen = {x.node_id}
    for _, inputs, output, _ in tape.records:
        for t in inputs:
            if t.requires_grad:
                assert t.node_id in seen
        seen.add(output.node_id)


def test_broadcast_gradient_sums_over_expanded_axes():
    ga, gb = grad_of(lambda a, b: T.sum_(T.mul(a, b)),
                     np.ones((3, 2)), np.array([[1.0, 2.0]]))
    assert ga.tolist() == [[1.0, 2.0]] * 3
    assert gb.tolist() == [[3.0, 3.0]]


def test_matmul_chain_32bit_against_finite_differences(rng):
    a = rng.normal(size=(3, 4)).astype(np.float32)
    b = rng.normal(size=(4, 5)).astype(np.float32)
    c = rng.normal(size=(5, 2)).astype(np.float32)
    err = finite_difference_check(
        lambda x, y, z: T.sum_(T.square(T.matmul(T.matmul(x, y), z))), [a, b, c], h=1e-3)
    assert err < 1e-3


LAYER_CASES = {
    "conv2d": (lambda x, k, b: T.sum_(T.square(T.conv2d(x, k, b, stride=1, padding=1))),
               [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv2d_stride2": (lambda x, k: T.sum_(T.square(T.conv2d(x, k, stride=2, padding=1))),
                       [(2, 2, 5, 5), (3, 2, 3, 3)]),
    "conv_transpose2d": (lambda x, k, b: T.sum_(T.square(
        T.conv_transpose2d(x, k, b, stride=2, padding=1, output_padding=1))),
        [(2, 3, 3, 3), (3, 2, 3, 3), (2,)]),
    "maxpool2d": (lambda x: T.sum_(T.square(T.maxpool2d(x))), [(2, 2, 5, 5)]),
    "batch_norm_4d": (lambda x, s, b: T.sum_(T.mul(T.batch_norm(x, s, b), T.Tensor(
        np.linspace(-1, 1, 2 * 3 * 3 * 3).reshape(2, 3, 3, 3)))), [(2, 3, 3, 3), (3,), (3,)]),
    "batch_norm_2d": (lambda x, s, b: T.sum_(T.mul(T.batch_norm(x, s, b), T.Tensor(
        np.linspace(-1, 1, 20).reshape(5, 4)))), [(5, 4), (4,), (4,)]),
    "relu": (lambda x: T.sum_(T.square(T.relu(x))), [(4, 5)]),
    "matmul": (lambda a, b: T.sum_(T.square(T.matmul(a, b))), [(3, 4), (4, 2)]),
    "pairwise_sq_distance": (lambda a, b: T.sum_(T.reciprocal(
        T.add(T.pairwise_sq_distance(a, b), 1.0))), [(4, 3), (2, 3)]),
    "l2_sq_distance": (lambda a, b: T.sum_(T.square(T.l2_sq_distance(a, b))), [(4, 3), (4, 3)]),
    "log_div_mean": (lambda a, b: T.mean(T.log(T.div(T.add(T.square(a), 1.0),
                                                      T.add(T.square(b), 1.0)))),
                     [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_64bit(name, rng):
    fn, shapes = LAYER_CASES[name]
    point = [rng.normal(size=s) for s in shapes]
    with T.precision(np.float64):
        err = finite_difference_check(fn, point, h=1e-6, fd_dtype=np.longdouble,
                                      zero_tol=ZERO_TOL["float64"])
    assert err < 1e-6


@pytest.mark.parametrize("name", sorted(LAYER_CASES))
def test_layer_gradients_32bit(name, rng):
    fn, shapes = LAYER_CASES[name]
    point = [rng.normal(size=s).astype(np.float32) for s in shapes]
    err = finite_difference_check(fn, point, h=1e-6, fd_dtype=np.longdouble, zero_tol=ZERO_TOL["float32"])
    assert err < 1e-3


# properties -----------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite),
       arrays(np.float32, st.tuples(st.integers(1, 4)), elements=finite))
def test_elementwise_ops_preserve_finiteness(a, b):
    if a.shape[1] != b.shape[0]:
        b = np.resize(b, a.shape[1])
    for op in (T.add, T.sub, T.mul):
        assert np.isfinite(op(T.Tensor(a), T.Tensor(b)).data).all()
    assert np.isfinite(T.relu(T.Tensor(a)).data).all()


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-10, 10)))
def test_grad_shape_matches_value_shape(a):
    (g,) = grad_of(lambda x: T.sum_(T.mul(T.relu(x), x)), a)
    assert g.shape == a.shape


@given(st.integers(1, 40), st.integers(1, 3), st.integers(1, 3))
def test_pool_output_size_covers_input(size, window, stride):
    out = T.pool_output_size(size, window, stride)
    assert (out - 1) * stride + window >= size
    assert out == 1 or (out - 2) * stride + window < size


# finite-difference oracle ---------------------------------------------------

def test_gradcheck_quadratic_is_exact():
    with T.precision(np.float64):
        err = finite_difference_check(lambda x: T.sum_(T.square(x)), [np.array([3.0])])
    assert err < 1e-9


def test_gradcheck_constant_function():
    with T.precision(np.float64):
        err = finite_difference_check(lambda x: T.sum_(T.mul(x, 0.0)), [np.array([1.0, 2.0])])
    assert err == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradcheck_non_finite_value_raises():
    with T.precision(np.float64):
        with pytest.raises(NonFiniteValue):
            finite_difference_check(lambda x: T.sum_(T.log(T.mul(x, np.inf))),
                                    [np.array([1.0])])
