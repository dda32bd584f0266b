import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adverseg import autograd as ag
from adverseg.autograd import GeometryError, ShapeError, Tensor, Tape, backward, grad_check, grad_check_report

from conftest import naive_conv2d


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((1, 5, 6)).astype(np.float32))
        out = ag.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_of_ones(self):
        out = ag.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 9.0

    def test_dilated_matches_loop_oracle(self):
        x = np.arange(25, dtype=np.float64).reshape(1, 5, 5)
        k = np.ones((1, 1, 3, 3))
        out = ag.conv2d(t64(x), t64(k), t64(np.zeros(1)), dilation=2)
        expected = naive_conv2d(x, k, np.zeros(1), dilation=2)
        assert out.shape == (1, 1, 1)
        assert expected[0, 0, 0] == 108.0  # 0+2+4+10+12+14+20+22+24
        np.testing.assert_array_equal(out.data, expected)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(3, 9), st.integers(3, 9),
           st.integers(1, 3), st.integers(1, 2), st.integers(0, 2), st.integers(1, 2), st.integers(0, 2**31 - 1))
    def test_agrees_with_naive(self, ci, co, h, w, k, stride, pad, dil, seed):
        if dil * (k - 1) + 1 > min(h, w) + 2 * pad:
            return
        r = np.random.default_rng(seed)
        x = r.standard_normal((ci, h, w))
        kern = r.standard_normal((co, ci, k, k))
        b = r.standard_normal(co)
        out = ag.conv2d(t64(x), t64(kern), t64(b), stride=stride, pad=pad, dilation=dil)
        np.testing.assert_allclose(out.data, naive_conv2d(x, kern, b, stride, pad, dil), rtol=1e-12, atol=1e-12)

    def test_batched_equals_per_sample(self, rng):
        x = rng.standard_normal((3, 2, 6, 6))
        k = rng.standard_normal((4, 2, 3, 3))
        b = rng.standard_normal(4)
        out = ag.conv2d(t64(x), t64(k), t64(b), stride=2, pad=1)
        for n in range(3):
            np.testing.assert_allclose(out.data[n], ag.conv2d(t64(x[n]), t64(k), t64(b), stride=2, pad=1).data)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ag.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_geometry_error(self):
        with pytest.raises(GeometryError):
            ag.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestActivations:
    def test_relu(self):
        out = ag.relu(Tensor(np.array([-2.0, 3.5])))
        assert list(out.data) == [0.0, 3.5]

    def test_sigmoid_half(self):
        assert ag.sigmoid(Tensor(np.array([0.0]))).data[0] == 0.5

    def test_leaky(self):
        assert ag.leaky_relu(Tensor(np.array([-1.0])), 0.2).data[0] == pytest.approx(-0.2)

    def test_sigmoid_strictly_interior(self):
        out = ag.sigmoid(Tensor(np.array([-200.0, 200.0], dtype=np.float32))).data
        assert 0.0 < out[0] and out[1] < 1.0

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ag.activation(Tensor(np.ones(2)), "tanh")


class TestSoftmax:
    def test_uniform(self):
        out = ag.softmax_channels(Tensor(np.zeros((4, 2, 3))))
        np.testing.assert_allclose(out.data, 0.25)

    def test_stabilised(self):
        out = ag.softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(2, 1, 1))).data
        assert np.all(np.isfinite(out))
        assert out[0, 0, 0] == pytest.approx(1.0)
        assert out[1, 0, 0] == pytest.approx(0.0, abs=1e-30)

    def test_scalar_oracle(self):
        z = [1.0, 2.0, 3.0]
        e = [np.exp(v) for v in z]
        expected = [v / sum(e) for v in e]
        out = ag.softmax_channels(t64(np.array(z).reshape(3, 1, 1))).data.ravel()
        np.testing.assert_allclose(out, expected, rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 6), st.floats(1e-3, 1e4), st.integers(0, 2**31 - 1))
    def test_simplex(self, c, mag, seed):
        z = np.random.default_rng(seed).uniform(-mag, mag, (c, 3, 3)).astype(np.float32)
        p = ag.softmax_channels(Tensor(z)).data
        assert np.all(np.abs(p.sum(axis=0) - 1.0) <= 1e-6)
        assert np.all((p >= 0) & (p <= 1))


class TestUpsample:
    def test_single_pixel(self):
        out = ag.upsample_nearest2x(Tensor(np.array([[[5.0]]])))
        assert out.shape == (1, 2, 2)
        assert np.all(out.data == 5.0)

    def test_grad_is_four(self):
        x = Tensor(np.array([[[5.0]]]), requires_grad=True)
        with Tape() as tape:
            loss = ag.sum(ag.upsample_nearest2x(x))
        backward(loss, tape)
        assert x.grad[0, 0, 0] == 4.0

    def test_index_oracle(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        out = ag.upsample_nearest2x(Tensor(x)).data
        for i in range(4):
            for j in range(4):
                assert out[0, i, j] == x[0, i // 2, j // 2]


class TestBackward:
    def test_sum(self):
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ag.sum(w)
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [1, 1, 1])

    def test_square(self):
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            loss = ag.sum(ag.mul(w, w))
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [2, 4, 6])

    def test_non_scalar(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = ag.scale(w, 2.0)
        with pytest.raises(ShapeError):
            backward(out, tape)

    def test_unreached_tensor_zero_grad(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            _unused = ag.scale(b, 3.0)
            loss = ag.sum(a)
        backward(loss, tape)
        np.testing.assert_array_equal(b.grad, 0.0)

    def test_each_record_replayed_once(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = ag.sum(ag.add(ag.scale(w, 2.0), w))
        assert len(tape) == 3
        backward(loss, tape)
        np.testing.assert_array_equal(w.grad, [3.0, 3.0])

    def test_no_recording_outside_tape(self):
        w = Tensor(np.ones(2), requires_grad=True)
        out = ag.sum(w)
        assert not out.requires_grad

    def test_deterministic(self, rng):
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def grads():
            kt = Tensor(k.copy(), requires_grad=True)
            xt = Tensor(x.copy(), requires_grad=True)
            with Tape() as tape:
                loss = ag.mean(ag.sigmoid(ag.conv2d(xt, kt, None, pad=1, dilation=2)))
            backward(loss, tape)
            return kt.grad, xt.grad

        g1, g2 = grads(), grads()
        assert g1[0].tobytes() == g2[0].tobytes()
        assert g1[1].tobytes() == g2[1].tobytes()


class TestGradCheck:
    def test_quadratic(self):
        w = t64([0.3, -1.2, 2.0])
        err = grad_check(lambda: ag.sum(ag.mul(w, w)), w, eps=1e-3)
        assert err < 1e-6

    def test_detects_wrong_gradient(self):
        w = t64([0.5, 1.5])

        def bad():
            # forward says 2w, recorded gradient says 1
            return ag._emit(np.asarray((2 * w.data).sum()), (w,), lambda g: (np.full_like(w.data, g),), "bad")

        assert grad_check(bad, w, eps=1e-3) > 0.1

    def test_eps_range(self):
        w = t64([1.0])
        with pytest.raises(ValueError):
            grad_check(lambda: ag.sum(w), w, eps=0.1)

    def test_kink_coordinates_skipped(self):
        # 2e-4 sits inside the +-eps window around relu's kink; the others do not
        w = t64([2e-4, 0.7, -0.9])
        rep = grad_check_report(lambda: ag.sum(ag.mul(ag.relu(w), w)), w, eps=1e-3)
        assert (rep.checked, rep.kink_skipped) == (2, 1)
        assert rep.max_rel_error < 1e-8

    def test_kinks_do_not_hide_bugs(self):
        w = t64([0.5, -0.5])

        def bad():
            return ag._emit(np.asarray(3 * w.data.sum()), (w,), lambda g: (np.full_like(w.data, g),), "bad")

        rep = grad_check_report(bad, w, eps=1e-3)
        assert rep.kink_skipped == 0 and rep.max_rel_error > 0.5


def _op_case(name, r):
    """Scalar-loss closure for one op on random small float64 shapes, plus the checked tensors."""
    c, h, w = int(r.integers(1, 4)), int(r.integers(4, 7)), int(r.integers(4, 7))
    x = t64(r.standard_normal((c, h, w)))
    proj = r.standard_normal  # random projection keeps the loss sensitive to every output

    if name == "conv2d":
        k = t64(r.standard_normal((2, c, 3, 3)) * 0.5)
        b = t64(r.standard_normal(2))
        stride, pad, dil = int(r.integers(1, 3)), int(r.integers(0, 3)), int(r.integers(1, 3))
        if dil * 2 + 1 > min(h, w) + 2 * pad:
            dil = 1
        shape = ag.conv2d(x, k, b, stride, pad, dil).shape
        m = proj(shape)
        return (lambda: ag.sum(ag.mul(ag.conv2d(x, k, b, stride, pad, dil), m))), [x, k, b]
    if name in ("relu", "leaky_relu"):
        # keep inputs away from the kink so central differences are exact
        x.data = np.where(np.abs(x.data) < 0.05, 0.3, x.data)
        m = proj(x.shape)
        return (lambda: ag.sum(ag.mul(ag.activation(x, name, 0.2), m))), [x]
    if name == "sigmoid":
        m = proj(x.shape)
        return (lambda: ag.sum(ag.mul(ag.sigmoid(x), m))), [x]
    if name == "softmax_channels":
        x = t64(r.standard_normal((c + 1, h, w)))
        m = proj(x.shape)
        return (lambda: ag.sum(ag.mul(ag.softmax_channels(x), m))), [x]
    if name == "upsample_nearest2x":
        m = proj((c, 2 * h, 2 * w))
        return (lambda: ag.sum(ag.mul(ag.upsample_nearest2x(x), m))), [x]
    if name == "global_avg_pool":
        m = proj((c, 1, 1))
        return (lambda: ag.sum(ag.mul(ag.global_avg_pool(x), m))), [x]
    if name == "log":
        x.data = np.abs(x.data) + 0.5
        m = proj(x.shape)
        return (lambda: ag.sum(ag.mul(ag.log(x), m))), [x]
    if name == "mul":
        y = t64(r.standard_normal(x.shape))
        return (lambda: ag.sum(ag.mul(x, y))), [x, y]
    if name == "add":
        y = t64(r.standard_normal(x.shape))
        m = proj(x.shape)
        return (lambda: ag.sum(ag.mul(ag.add(x, y), m))), [x, y]
    if name == "mean":
        return (lambda: ag.mean(ag.mul(x, x))), [x]
    raise KeyError(name)


OPS = ["conv2d", "relu", "leaky_relu", "sigmoid", "softmax_channels", "upsample_nearest2x",
       "global_avg_pool", "log", "mul", "add", "mean"]


@pytest.mark.parametrize("op", OPS)
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    fn, params = _op_case(op, np.random.default_rng(seed))
    assert grad_check(fn, params, eps=1e-3) < 1e-3
