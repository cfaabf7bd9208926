import time

import numpy as np
import pytest

from s2m2 import gradcheck
from s2m2.tensor import Tensor


def test_suite_passes_within_budget():
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - start
    failed = [(r.name, r.max_rel_error) for r in results if not r.passed]
    assert not failed
    assert elapsed < 60.0
    names = {r.name for r in results}
    for required in ("conv2d_nhwc(same,s2)", "manifold_mixup_loss(layer=0)", "manifold_mixup_loss(layer=3)",
                     "rotation_loss", "rotated_class_loss", "exemplar_loss", "phase_loss(2)"):
        assert required in names


def test_checker_detects_wrong_gradient():
    # a deliberately broken op: forward x^2, backward claims 3x
    x = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)

    def broken():
        return Tensor._from_op(np.asarray((x.data ** 2).sum()), (x,), lambda g: (3 * x.data * g,), "broken")

    result = gradcheck.check_gradients("broken", broken, [x])
    assert not result.passed
    assert result.max_rel_error == pytest.approx(0.2)


def test_relative_error():
    assert gradcheck.relative_error(np.array([1.0]), np.array([1.0])) == 0.0
    assert gradcheck.relative_error(np.array([1.0]), np.array([3.0])) == pytest.approx(0.5)
    # tiny gradients are judged against the floor, not against each other
    assert gradcheck.relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-3)
