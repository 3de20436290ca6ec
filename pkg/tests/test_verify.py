"""Finite-difference verification harness."""

import numpy as np
import pytest

from sorank.gradcheck import grad_check
from sorank.tensor import Tensor, tsum
from sorank.verify import check_composed, check_op_gradients, run_all


class TestGradCheckCore:
    def test_square_at_three(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        rep = grad_check(lambda: x * x, {"x": x})
        assert rep.max_rel_err["x"] <= 1e-8
        # analytic derivative is 2x = 6
        loss = x * x
        x.grad = None
        loss.backward()
        assert x.grad == pytest.approx(6.0)

    def test_requires_float64(self):
        x = Tensor(np.array(1.0, dtype=np.float32), requires_grad=True)
        with pytest.raises(ValueError):
            grad_check(lambda: x * x, {"x": x})

    def test_reports_per_parameter(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        b = Tensor(np.array([3.0]), requires_grad=True)
        rep = grad_check(lambda: tsum(a * a) + tsum(b), {"a": a, "b": b})
        assert set(rep.max_rel_err) == {"a", "b"}
        assert rep.passed


class TestOpSuite:
    def test_all_ops_pass(self):
        errors = check_op_gradients(seed=0)
        assert set(errors) >= {"matmul", "conv2d", "relu", "gelu", "softmax",
                               "layer_norm", "cross_entropy", "smooth_l1",
                               "embedding", "roi_pool"}
        for name, err in errors.items():
            assert err <= 1e-4, f"{name}: {err}"


class TestComposed:
    def test_image_to_ranking_loss_path(self):
        rep = check_composed(seed=0)
        assert rep.passed, rep.max_rel_err
        assert "image" in rep.max_rel_err


def test_run_all_passes():
    errors, ok = run_all(seed=0)
    assert ok
    assert all(v <= 1e-4 for v in errors.values())
