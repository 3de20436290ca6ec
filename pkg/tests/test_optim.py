"""SGD with momentum, warm-up, and milestone decay."""

import numpy as np
import pytest

from sorank.optim import MissingGradError, SgdState, sgd_step
from sorank.tensor import Tensor


class TestSchedule:
    def test_warmup_first_iteration(self):
        s = SgdState(base_lr=1e-4, warmup_iters=1000)
        assert s.effective_lr() == pytest.approx(1e-7)

    def test_warmup_completes(self):
        s = SgdState(base_lr=1e-2, warmup_iters=100)
        s.iter = 99
        assert s.effective_lr() == pytest.approx(1e-2)
        s.iter = 500
        assert s.effective_lr() == pytest.approx(1e-2)

    def test_warmup_is_linear(self):
        s = SgdState(base_lr=1.0, warmup_iters=10)
        got = []
        for s.iter in range(10):
            got.append(s.effective_lr())
        np.testing.assert_allclose(got, (np.arange(10) + 1) / 10.0)

    def test_milestone_decay(self):
        s = SgdState(base_lr=1.0, warmup_iters=0, milestones=[5, 8],
                     decay=0.1)
        s.iter = 4
        assert s.effective_lr() == pytest.approx(1.0)
        s.iter = 5
        assert s.effective_lr() == pytest.approx(0.1)
        s.iter = 8
        assert s.effective_lr() == pytest.approx(0.01)

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError):
            SgdState(milestones=[10, 10])


class TestStep:
    def test_plain_descent(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        p.grad = np.array([0.5, -0.5])
        state = SgdState(base_lr=0.1, momentum=0.0, warmup_iters=0)
        sgd_step(state, [("p", p)])
        np.testing.assert_allclose(p.data, [0.95, 2.05])

    def test_momentum_accumulates(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = SgdState(base_lr=1.0, momentum=0.5, warmup_iters=0)
        p.grad = np.array([1.0])
        sgd_step(state, [("p", p)])        # v=1, p=-1
        p.grad = np.array([1.0])
        sgd_step(state, [("p", p)])        # v=1.5, p=-2.5
        np.testing.assert_allclose(p.data, [-2.5])
        np.testing.assert_allclose(state.velocity["p"], [1.5])

    def test_missing_grad_raises(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = SgdState()
        with pytest.raises(MissingGradError):
            sgd_step(state, [("p", p)])

    def test_missing_grad_skipped_when_allowed(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        state = SgdState()
        sgd_step(state, [("p", p)], require_grads=False)
        np.testing.assert_allclose(p.data, [1.0])

    def test_iter_advances(self):
        state = SgdState(warmup_iters=0)
        sgd_step(state, [], require_grads=False)
        assert state.iter == 1
