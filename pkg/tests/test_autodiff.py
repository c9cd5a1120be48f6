import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import monodet3d.autodiff as ad
from monodet3d.autodiff import Tensor

from conftest import fd_gradient, max_rel_err


def t(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def check_against_fd(build_loss, tensors, tol=1e-4, h=1e-6):
    """build_loss(*tensors) -> scalar Tensor; compares backward to FD."""
    loss = build_loss(*tensors)
    loss.backward()
    arrays = [x.data for x in tensors]

    def f(*arrs):
        fresh = [Tensor(a) for a in arrs]
        return build_loss(*fresh).item()

    fds = fd_gradient(f, arrays, h=h)
    for x, fd in zip(tensors, fds):
        assert x.grad is not None
        assert max_rel_err(x.grad, fd) < tol


# -- matmul -------------------------------------------------------------------


def test_matmul_identity():
    a = t(np.eye(2))
    b = t([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, b).data, b.data)


def test_matmul_hand_case():
    out = ad.matmul(t([[1.0, 2.0]]), t([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))
    with pytest.raises(ValueError):
        ad.matmul(t(np.ones((2, 2))), t(np.ones((2, 2, 2))))
    with pytest.raises(ValueError):
        ad.matmul(t(np.ones((2, 3, 4))), t(np.ones((3, 4, 5))))


def test_matmul_gradient(rng):
    a = t(rng.uniform(-2, 2, (3, 4)))
    b = t(rng.uniform(-2, 2, (4, 5)))
    check_against_fd(lambda x, y: ad.tsum(ad.matmul(x, y)), [a, b], tol=1e-6)


def test_batched_matmul_gradient(rng):
    a = t(rng.uniform(-2, 2, (2, 3, 4)))
    b = t(rng.uniform(-2, 2, (2, 4, 3)))
    w = rng.uniform(-1, 1, (2, 3, 3))
    check_against_fd(
        lambda x, y: ad.tsum(ad.mul(ad.matmul(x, y), Tensor(w))), [a, b], tol=1e-6
    )


# -- softmax ------------------------------------------------------------------


def test_softmax_uniform():
    out = ad.softmax(t([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_large_inputs_stable():
    out = ad.softmax(t([1000.0, 1000.0]), axis=0)
    assert np.allclose(out.data, 0.5, atol=1e-15)


def test_softmax_closed_form():
    out = ad.softmax(t([0.0, np.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(vals, shift):
    x = np.asarray(vals)
    out = ad.softmax(Tensor(x), axis=0).data
    assert abs(out.sum() - 1.0) < 1e-9
    shifted = ad.softmax(Tensor(x + shift), axis=0).data
    assert np.allclose(out, shifted, atol=1e-12)


def test_softmax_backward_closed_form():
    x = t([0.0, 0.0])
    loss = ad.reshape(ad.gather(ad.softmax(x, axis=0), [0]), ())
    loss.backward()
    assert np.allclose(x.grad, [0.25, -0.25], atol=1e-12)


def test_softmax_gradient(rng):
    x = t(rng.uniform(-2, 2, (3, 5)))
    w = rng.uniform(-1, 1, (3, 5))
    check_against_fd(
        lambda v: ad.tsum(ad.mul(ad.softmax(v, axis=1), Tensor(w))), [x], tol=1e-6
    )


# -- elementwise --------------------------------------------------------------


def test_elementwise_trivial_cases():
    assert ad.relu(t([-1.0])).data[0] == 0.0
    assert ad.exp(t([0.0])).data[0] == 1.0
    assert ad.absolute(t([-2.5])).data[0] == 2.5
    assert ad.sigmoid(t([0.0])).data[0] == 0.5


def test_square_derivative_is_two_x():
    x = t([3.0])
    loss = ad.tsum(ad.mul(x, x))
    loss.backward()
    assert np.allclose(x.grad, [6.0], atol=1e-12)


def test_elementwise_gradients(rng):
    ops = [
        (lambda v: ad.relu(v), (-2, 2)),
        (lambda v: ad.exp(v), (-2, 2)),
        (lambda v: ad.log(v), (0.5, 3)),
        (lambda v: ad.sigmoid(v), (-2, 2)),
        (lambda v: ad.log_sigmoid(v), (-2, 2)),
        (lambda v: ad.absolute(v), (-2, 2)),
        (lambda v: ad.mul(v, 1.7), (-2, 2)),
    ]
    w = rng.uniform(-1, 1, 7)
    for op, (lo, hi) in ops:
        x = t(rng.uniform(lo, hi, 7))
        check_against_fd(lambda v: ad.tsum(ad.mul(op(v), Tensor(w))), [x], tol=1e-5)


def test_two_arg_elementwise_gradients(rng):
    w = rng.uniform(-1, 1, (3, 4))
    for op in (ad.add, ad.mul, ad.div, ad.maximum, ad.minimum):
        a = t(rng.uniform(0.5, 2, (3, 4)))
        b = t(rng.uniform(0.5, 2, (4,)))  # trailing-dim broadcast
        check_against_fd(
            lambda x, y: ad.tsum(ad.mul(op(x, y), Tensor(w))), [a, b], tol=1e-5
        )


def test_broadcast_rejects_incompatible():
    with pytest.raises(ValueError):
        ad.add(t(np.ones((2, 3))), t(np.ones((2,))))


# -- layer norm ---------------------------------------------------------------


def test_layer_norm_constant_slice_zero():
    x = t(np.full((2, 4), 3.7))
    out = ad.layer_norm(x, t(np.ones(4)), t(np.zeros(4)))
    assert np.allclose(out.data, 0.0, atol=1e-10)


def test_layer_norm_two_values():
    out = ad.layer_norm(t([[1.0, 3.0]]), t(np.ones(2)), t(np.zeros(2)))
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-4)  # epsilon shifts slightly


def test_layer_norm_gradient(rng):
    x = t(rng.uniform(-2, 2, (3, 6)))
    gain = t(rng.uniform(0.5, 1.5, 6))
    bias = t(rng.uniform(-0.5, 0.5, 6))
    w = rng.uniform(-1, 1, (3, 6))
    check_against_fd(
        lambda a, g, b: ad.tsum(ad.mul(ad.layer_norm(a, g, b), Tensor(w))),
        [x, gain, bias],
        tol=1e-5,
    )


# -- conv2d -------------------------------------------------------------------


def test_conv2d_1x1_identity_weight():
    x = t(np.arange(12.0).reshape(1, 3, 4))
    w = t(np.ones((1, 1, 1, 1)))
    out = ad.conv2d(x, w)
    assert np.array_equal(out.data, x.data)


def test_conv2d_all_ones_center():
    x = t(np.ones((1, 3, 3)))
    w = t(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, w, stride=1, padding=1)
    assert out.data.shape == (1, 3, 3)
    assert out.data[0, 1, 1] == 9.0
    assert out.data[0, 0, 0] == 4.0  # corner sees a 2x2 window


def test_conv2d_kernel_too_large():
    with pytest.raises(ValueError):
        ad.conv2d(t(np.ones((1, 2, 2))), t(np.ones((1, 1, 5, 5))))


def test_conv2d_gradient(rng):
    x = t(rng.uniform(-2, 2, (2, 4, 4)))
    w = t(rng.uniform(-1, 1, (3, 2, 3, 3)))
    proj = rng.uniform(-1, 1, (3, 2, 2))
    check_against_fd(
        lambda a, k: ad.tsum(ad.mul(ad.conv2d(a, k, stride=2, padding=1), Tensor(proj))),
        [x, w],
        tol=1e-5,
    )


def test_conv2d_strided_floor_extent():
    out = ad.conv2d(t(np.ones((1, 32, 64))), t(np.ones((1, 1, 3, 3))), stride=2, padding=1)
    assert out.data.shape == (1, 16, 32)


# -- resampling ---------------------------------------------------------------


def test_upsample_example():
    x = t([[1.0, 2.0], [3.0, 4.0]])
    out = ad.interpolate_nearest(ad.reshape(x, (1, 2, 2)), 2)
    expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
    assert np.array_equal(out.data[0], expected)


def test_resample_factor_one_identity():
    x = t(np.ones((1, 2, 2)))
    assert ad.interpolate_nearest(x, 1) is x
    assert ad.downsample_nearest(x, 1) is x


def test_resample_factor_must_be_power_of_two():
    with pytest.raises(ValueError):
        ad.interpolate_nearest(t(np.ones((1, 4, 4))), 3)


def test_down_then_up_constant_invariant():
    x = t(np.full((2, 4, 4), 2.5))
    out = ad.interpolate_nearest(ad.downsample_nearest(x, 2), 2)
    assert np.array_equal(out.data, x.data)


def test_resample_gradients(rng):
    w_up = rng.uniform(-1, 1, (2, 8, 8))
    check_against_fd(
        lambda a: ad.tsum(ad.mul(ad.interpolate_nearest(a, 2), Tensor(w_up))),
        [t(rng.uniform(-2, 2, (2, 4, 4)))],
        tol=1e-6,
    )
    w_dn = rng.uniform(-1, 1, (2, 2, 2))
    check_against_fd(
        lambda a: ad.tsum(ad.mul(ad.downsample_nearest(a, 2), Tensor(w_dn))),
        [t(rng.uniform(-2, 2, (2, 4, 4)))],
        tol=1e-6,
    )


# -- gather / concat / shape --------------------------------------------------


def test_gather_concat_gradients(rng):
    x = t(rng.uniform(-2, 2, (5, 3)))
    y = t(rng.uniform(-2, 2, (2, 3)))
    w = rng.uniform(-1, 1, (6, 3))

    def loss(a, b):
        picked = ad.gather(a, [0, 2, 2, 4], axis=0)
        joined = ad.concat([picked, b], axis=0)
        return ad.tsum(ad.mul(joined, Tensor(w)))

    check_against_fd(loss, [x, y], tol=1e-6)


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather(t(np.ones((3, 2))), [3], axis=0)


def test_transpose_reshape_roundtrip(rng):
    x = t(rng.uniform(-1, 1, (2, 3, 4)))
    out = ad.transpose(ad.reshape(ad.transpose(x, (2, 0, 1)), (4, 6)), (1, 0))
    assert out.data.shape == (6, 4)
    ad.tsum(out).backward()
    assert np.allclose(x.grad, 1.0)


# -- backward contract --------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t(np.arange(6.0).reshape(2, 3))
    ad.tsum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = t(np.ones(3))
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()


def test_backward_accumulates_across_calls():
    x = t([1.0, 2.0])
    loss = ad.tsum(ad.mul(x, x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.allclose(x.grad, 2.0 * first)


def test_shared_subexpression_gradient():
    x = t([2.0])
    y = ad.mul(x, x)
    loss = ad.tsum(ad.add(y, y))
    loss.backward()
    assert np.allclose(x.grad, [8.0])


def test_detach_blocks_gradient():
    x = t([1.0, 2.0])
    loss = ad.tsum(ad.mul(x.detach(), x))
    loss.backward()
    assert np.allclose(x.grad, x.data)


# -- determinism and finiteness ----------------------------------------------


def test_forward_determinism():
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)

    def run(r):
        x = Tensor(r.uniform(-1, 1, (4, 4)))
        w = Tensor(r.uniform(-1, 1, (4, 4)))
        return ad.softmax(ad.matmul(x, w), axis=1).data

    assert np.array_equal(run(rng1), run(rng2))


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_finite_check_raises_when_enabled():
    ad.set_check_finite(True)
    try:
        with pytest.raises(FloatingPointError):
            ad.log(Tensor([0.0]))
        with pytest.raises(FloatingPointError):
            Tensor([np.nan])
    finally:
        ad.set_check_finite(False)


def test_log_softmax_matches_log_of_softmax(rng):
    x = t(rng.uniform(-5, 5, (3, 4)))
    a = ad.log_softmax(x, axis=1).data
    b = np.log(ad.softmax(Tensor(x.data), axis=1).data)
    assert np.allclose(a, b, atol=1e-12)
    assert np.all(np.isfinite(ad.log_softmax(Tensor([[0.0, 1e4]]), axis=1).data))
