import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adverseg.autograd import ShapeError, Tensor
from adverseg.optim import (
    AdamState,
    MissingGradError,
    SgdState,
    SwaState,
    adam_step,
    poly_lr,
    sgd_step,
    swa_update,
)


def param(value, grad=None):
    p = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
    if grad is not None:
        p.grad = np.array(grad, dtype=np.float64)
    return p


class TestPolyLr:
    def test_start(self):
        assert poly_lr(0.00025, 0, 20000, 0.9) == 0.00025

    def test_end(self):
        assert poly_lr(0.00025, 20000, 20000, 0.9) == 0.0

    def test_midpoint(self):
        assert poly_lr(0.00025, 10000, 20000, 0.9) == pytest.approx(0.00025 * 0.5 ** 0.9, rel=1e-15)

    def test_range(self):
        with pytest.raises(ValueError):
            poly_lr(0.1, 11, 10)

    @settings(max_examples=50)
    @given(st.integers(1, 5000), st.floats(0.01, 3.0))
    def test_monotone(self, max_iter, power):
        lrs = [poly_lr(1.0, k, max_iter, power) for k in range(0, max_iter + 1, max(1, max_iter // 50))]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestSgd:
    def test_plain_step(self):
        p = param([1.0], [1.0])
        sgd_step([p], SgdState(momentum=0.0, weight_decay=0.0), lr=0.1)
        assert p.data[0] == pytest.approx(0.9)

    def test_momentum_recursion(self):
        # buf1 = 1, p1 = -1; buf2 = 0.9 + 1 = 1.9, p2 = -2.9
        p = param([0.0], [1.0])
        st_ = SgdState(momentum=0.9, weight_decay=0.0)
        sgd_step([p], st_, lr=1.0)
        assert p.data[0] == pytest.approx(-1.0)
        p.grad = np.array([1.0])
        sgd_step([p], st_, lr=1.0)
        assert p.data[0] == pytest.approx(-2.9)

    def test_fixed_point(self):
        p = param([0.3, -0.7], [0.0, 0.0])
        sgd_step([p], SgdState(momentum=0.9, weight_decay=0.0), lr=0.5)
        np.testing.assert_array_equal(p.data, [0.3, -0.7])

    def test_weight_decay(self):
        p = param([2.0], [0.0])
        sgd_step([p], SgdState(momentum=0.0, weight_decay=0.5), lr=0.1)
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)

    def test_missing_grad(self):
        with pytest.raises(MissingGradError):
            sgd_step([param([1.0])], SgdState(), lr=0.1)


class TestAdam:
    @pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
    def test_first_step_is_lr_sign(self, g):
        p = param([0.5], [g])
        adam_step([p], AdamState(beta1=0.9, beta2=0.99), lr=1e-2)
        # m_hat = g, v_hat = g^2 after bias correction
        assert p.data[0] - 0.5 == pytest.approx(-1e-2 * g / (abs(g) + 1e-8), rel=1e-9)

    def test_zero_grad(self):
        p = param([0.5], [0.0])
        st_ = AdamState()
        adam_step([p], st_, lr=1e-2)
        assert p.data[0] == 0.5
        assert st_.step_count == 1

    def test_quadratic_descent(self):
        p = param([1.0])
        st_ = AdamState(beta1=0.9, beta2=0.99)
        trace = []
        for _ in range(100):
            p.grad = 2 * p.data
            adam_step([p], st_, lr=0.01)
            trace.append(abs(p.data[0]))
        assert all(b < a for a, b in zip(trace, trace[1:]))
        assert all(v >= 0 for v in st_.v[0])


class TestSwa:
    def test_fixed_point_both_modes(self):
        a = {"w": np.array([0.1, 0.2], np.float32)}
        for mode in ("running_mean", "literal_eq7"):
            s = SwaState.from_params(a, n=5, mode=mode)
            swa_update(s, a)
            np.testing.assert_array_equal(s.theta_swa["w"], a["w"])

    def test_literal_pairwise(self):
        s = SwaState.from_params({"w": np.array([1.0, -3.0])}, n=1, mode="literal_eq7")
        swa_update(s, {"w": np.array([2.0, 5.0])})
        np.testing.assert_array_equal(s.theta_swa["w"], [1.5, 1.0])

    def test_running_mean_three(self):
        s = SwaState.from_params({"w": np.array([9.0])}, mode="running_mean")
        for v in (1.0, 2.0, 3.0):
            swa_update(s, {"w": np.array([v])})
        assert s.theta_swa["w"][0] == 2.0

    def test_shape_mismatch(self):
        s = SwaState.from_params({"w": np.zeros(2)})
        with pytest.raises(ShapeError):
            swa_update(s, {"w": np.zeros(3)})

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 50), st.integers(0, 2**31 - 1))
    def test_running_mean_property(self, k, seed):
        r = np.random.default_rng(seed)
        snaps = r.standard_normal((k, 7)).astype(np.float32) * 10 ** r.uniform(-3, 3)
        s = SwaState.from_params({"w": r.standard_normal(7)}, mode="running_mean")
        for x in snaps:
            swa_update(s, {"w": x})
        expected = snaps.astype(np.float64).mean(axis=0)
        np.testing.assert_allclose(s.theta_swa["w"], expected, rtol=1e-6, atol=1e-12 * np.abs(snaps).max())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 20), st.integers(1, 30), st.integers(0, 2**31 - 1))
    def test_literal_envelope(self, n, k, seed):
        r = np.random.default_rng(seed)
        init = r.standard_normal(5)
        s = SwaState.from_params({"w": init}, n=n, mode="literal_eq7")
        seen = [init]
        for _ in range(k):
            x = r.standard_normal(5)
            prev = s.theta_swa["w"].copy()
            swa_update(s, {"w": x})
            np.testing.assert_allclose(s.theta_swa["w"], (prev * n + x) / (n + 1), rtol=1e-12)
            seen.append(x)
            lo, hi = np.min(seen, axis=0), np.max(seen, axis=0)
            assert np.all(s.theta_swa["w"] >= lo - 1e-12) and np.all(s.theta_swa["w"] <= hi + 1e-12)


def test_steps_deterministic():
    def run():
        p = param(np.linspace(-1, 1, 6))
        sgd, adam = SgdState(), AdamState()
        q = param(np.linspace(2, 3, 6))
        for i in range(10):
            p.grad = np.sin(p.data * (i + 1))
            q.grad = np.cos(q.data * (i + 1))
            sgd_step([p], sgd, 0.05)
            adam_step([q], adam, 0.05)
        return p.data.tobytes() + q.data.tobytes()

    assert run() == run()
