"""Adam update math, the warmup/decay schedule, and the grad_check contract."""

import numpy as np
import pytest

from dialoqa import tensor as T
from dialoqa.errors import ConfigError, DeterminismError, ShapeError
from dialoqa.optim import AdamState, GradCheckReport, LRSchedule, adam_step, grad_check, lr_at_step


def _params(**arrays):
    return {k: T.Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


class TestAdam:
    def test_zero_grads_no_decay_is_identity(self):
        params = _params(w=[1.0, -2.0, 3.0])
        state = AdamState(weight_decay=0.0)
        adam_step(params, {"w": np.zeros(3)}, state, lr=0.1)
        np.testing.assert_array_equal(params["w"].array, [1.0, -2.0, 3.0])
        assert state.step == 1

    def test_first_step_moves_by_lr(self):
        # After bias correction, |delta| = lr * |g| / (|g| + eps) for step 1.
        for g in (0.5, -3.0):
            params = _params(w=[1.0])
            state = AdamState(weight_decay=0.0)
            adam_step(params, {"w": np.array([g])}, state, lr=0.1)
            delta = params["w"].array[0] - 1.0
            assert abs(abs(delta) - 0.1) < 1e-6
            assert np.sign(delta) == -np.sign(g)

    def test_descends_quadratic(self):
        # 10 steps on f(w) = w^2 from w=1: |w| strictly decreases each step.
        params = _params(w=[1.0])
        state = AdamState(weight_decay=0.0)
        trace = [1.0]
        for _ in range(10):
            grad = 2.0 * params["w"].array
            adam_step(params, {"w": grad}, state, lr=0.1)
            trace.append(abs(float(params["w"].array[0])))
        assert all(b < a for a, b in zip(trace, trace[1:]))

    def test_decay_is_decoupled(self):
        # zero gradient + weight decay shrinks weights directly by lr*wd*w
        params = _params(w=[2.0])
        state = AdamState(weight_decay=0.01)
        adam_step(params, {"w": np.zeros(1)}, state, lr=0.5)
        np.testing.assert_allclose(params["w"].array, [2.0 - 0.5 * 0.01 * 2.0])

    def test_shape_mismatch(self):
        params = _params(w=[1.0, 2.0])
        with pytest.raises(ShapeError, match="w"):
            adam_step(params, {"w": np.zeros(3)}, AdamState(), lr=0.1)

    def test_step_strictly_increments(self):
        params = _params(w=[1.0])
        state = AdamState()
        for expected in (1, 2, 3):
            adam_step(params, {"w": np.ones(1)}, state, lr=0.0)
            assert state.step == expected

    def test_moment_shapes_match_params(self):
        params = _params(w=np.ones((2, 3)), b=np.ones(4))
        state = AdamState()
        grads = {k: np.ones_like(p.array) for k, p in params.items()}
        adam_step(params, grads, state, lr=0.01)
        for k, p in params.items():
            assert state.first_moment[k].shape == p.array.shape
            assert state.second_moment[k].shape == p.array.shape


class TestSchedule:
    def test_interpolation_points(self):
        s = LRSchedule(5e-5, 100, 0.1)
        assert lr_at_step(s, 5) == pytest.approx(2.5e-5)
        assert lr_at_step(s, 10) == pytest.approx(5e-5)
        assert lr_at_step(s, 55) == pytest.approx(5e-5 * (100 - 55) / 90)

    def test_endpoints_zero(self):
        s = LRSchedule(3e-4, 200, 0.25)
        assert lr_at_step(s, 0) == 0.0
        assert lr_at_step(s, 200) == 0.0

    def test_out_of_range(self):
        s = LRSchedule(1e-4, 10, 0.1)
        with pytest.raises(ValueError):
            lr_at_step(s, 11)
        with pytest.raises(ValueError):
            lr_at_step(s, -1)

    def test_continuity_bound(self):
        s = LRSchedule(7e-4, 40, 0.2)
        warmup_steps = 0.2 * 40
        bound = s.base_lr / min(warmup_steps, 40 - warmup_steps) + 1e-15
        for step in range(40):
            assert abs(lr_at_step(s, step) - lr_at_step(s, step + 1)) <= bound

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            LRSchedule(1e-4, 0, 0.1)
        with pytest.raises(ConfigError):
            LRSchedule(1e-4, 10, 1.0)


class TestGradCheck:
    def test_quadratic_exact(self):
        w = T.Tensor([3.0], requires_grad=True)

        def loss():
            return T.tsum(w * w)

        report = grad_check(loss, [w], h=1e-4)
        assert abs(report.worst_analytic - 6.0) < 1e-9 or report.max_rel_err < 1e-6
        # central differences are exact for quadratics up to roundoff
        assert report.max_rel_err < 1e-6

    def test_cross_entropy_k5(self):
        logits = T.Tensor(np.linspace(-1, 1, 5), requires_grad=True)

        def loss():
            return T.cross_entropy(logits, 3)

        assert grad_check(loss, [logits], h=1e-4).max_rel_err < 1e-6

    def test_nondeterministic_loss_detected(self):
        rng = np.random.default_rng(0)
        w = T.Tensor([1.0], requires_grad=True)

        def loss():
            return T.tsum(w * rng.random())

        with pytest.raises(DeterminismError):
            grad_check(loss, [w])

    def test_bad_h(self):
        w = T.Tensor([1.0], requires_grad=True)
        with pytest.raises(ConfigError):
            grad_check(lambda: T.tsum(w), [w], h=0.0)

    def test_sampled_subset(self):
        w = T.Tensor(np.random.default_rng(1).normal(size=100), requires_grad=True)

        def loss():
            return T.tsum(w * w)

        report = grad_check(
            loss, {"w": w}, max_coords_per_param=10, rng=np.random.default_rng(2)
        )
        assert report.checked == 10
        assert report.max_rel_err < 1e-6

    def test_report_passed(self):
        assert GradCheckReport(5e-5, "w", 0, 1.0, 1.0, 1).passed(1e-4)
        assert not GradCheckReport(2e-4, "w", 0, 1.0, 1.0, 1).passed(1e-4)
