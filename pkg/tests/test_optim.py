import numpy as np
import pytest

from s2m2.errors import NonFiniteError, ValidationError
from s2m2.optim import SGD, Adam, make_optimizer
from s2m2.tensor import Tensor


def _param(value, grad):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_sgd_plain_step():
    p = _param([0.0], [1.0])
    SGD([p], lr=0.1, momentum=0.0).step()
    np.testing.assert_array_equal(p.data, [-0.1])


def test_sgd_momentum_accumulates():
    p = _param([0.0], [1.0])
    opt = SGD([p], lr=0.1, momentum=0.9)
    opt.step()
    opt.step()
    np.testing.assert_allclose(p.data, [-0.1 - 0.1 * 1.9], rtol=1e-15)


@pytest.mark.parametrize("g", [1e-6, -3.0, 250.0])
def test_adam_first_step_is_lr_times_sign(g):
    p = _param([1.0], [g])
    Adam([p], lr=1e-2).step()
    np.testing.assert_allclose(p.data, [1.0 - 1e-2 * np.sign(g)], rtol=0, atol=1e-2 * 1e-8 / abs(g) + 1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_grad_is_fixed_point(kind):
    p = _param([0.5, -2.0], [0.0, 0.0])
    make_optimizer(kind, [p], lr=0.1, momentum=0.0).step()
    np.testing.assert_array_equal(p.data, [0.5, -2.0])


def test_non_finite_gradient_aborts_without_update():
    good, bad = _param([1.0], [1.0]), _param([2.0], [np.nan])
    bad.name = "block1.weight"
    opt = SGD([good, bad], lr=0.1, momentum=0.0)
    with pytest.raises(NonFiniteError, match="block1.weight"):
        opt.step()
    np.testing.assert_array_equal(good.data, [1.0])


def test_invalid_settings():
    with pytest.raises(ValidationError):
        SGD([], lr=0.0)
    with pytest.raises(ValidationError):
        make_optimizer("rmsprop", [])
