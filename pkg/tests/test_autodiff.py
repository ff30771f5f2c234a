from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aamgan import autodiff as ad
from aamgan.autodiff import Tensor
from aamgan.exceptions import TensorShapeError

from primitives import PRIMITIVES, worst_error


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    assert worst_error(name, cases=5, seed=11) <= 1e-4


def test_gradcheck_catches_a_wrong_rule():
    def bad_square(a):
        a = ad.as_tensor(a)
        return ad.custom_op(a.data ** 2, (a,), lambda g: (g * a.data,))
    assert ad.gradcheck(bad_square, [np.linspace(0.5, 2, 6)]) > 0.1


def test_identity_kernel_conv_is_identity():
    x = np.random.default_rng(0).normal(size=(2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ad.conv2d(Tensor(x), Tensor(w), pad=1).data, x)


def test_conv_against_direct_loops():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(1, 2, 6, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[2]):
            for j in range(out.shape[3]):
                ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_transposed_conv_is_adjoint_of_conv():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 4, 4))
    y = rng.normal(size=(2, 4, 4, 4))
    lhs = np.sum(ad.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data * y)
    rhs = np.sum(x * ad.conv_transpose2d(Tensor(y), Tensor(w), stride=2, pad=1).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30))
def test_tanh_and_sigmoid_match_numpy(v):
    assert ad.tanh(Tensor([v])).data[0] == pytest.approx(np.tanh(v), abs=1e-15)
    assert ad.sigmoid(Tensor([v])).data[0] == pytest.approx(1 / (1 + np.exp(-v)), rel=1e-12, abs=1e-300)


def test_bce_stable_for_large_logits():
    out = ad.bce_with_logits(Tensor([1000.0, -1000.0]), Tensor([1.0, 0.0]))
    assert out.item() == 0.0
    out = ad.bce_with_logits(Tensor([-1000.0]), 1.0)
    assert out.item() == pytest.approx(1000.0)


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    ad.sum(ad.square(x)).backward()
    ad.sum(ad.square(x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gradient():
    x = Tensor([3.0], requires_grad=True)
    y = ad.mul(x, x)
    ad.add(y, y).backward(np.ones(1))
    assert x.grad[0] == pytest.approx(12.0)


def test_constants_get_no_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 6.0])
    ad.sum(ad.mul(x, c)).backward()
    assert c.grad is None and x.grad.tolist() == [5.0, 6.0]


def test_shape_errors_name_the_op():
    with pytest.raises(TensorShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(TensorShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(TensorShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(TensorShapeError):
        Tensor(np.ones(3), requires_grad=True).backward()


def test_clamp_blocks_gradient_outside():
    x = Tensor([-2.0, 0.5, 2.0], requires_grad=True)
    ad.sum(ad.clamp(x, -1, 1)).backward()
    assert x.grad.tolist() == [0.0, 1.0, 0.0]
