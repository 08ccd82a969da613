"""Gradient checks against central finite differences of independent
float64 reference forwards, plus hand-computed value cases."""

import math

import numpy as np
import pytest

from hdrfuse import autodiff as ad
from hdrfuse.autodiff import AdamState, Tensor, adam_step, backward
from hdrfuse.errors import ValidationError

H_FD = 1e-3
REL_TOL = 1e-3
KINK = 1e-4


# ---------------------------------------------------------------------------
# Independent float64 reference forwards (loops, no shared code)
# ---------------------------------------------------------------------------

def ref_conv2d(x, w, b):
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    pad = (k - 1) // 2
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((n, cout, h, wd))
    for ni in range(n):
        for co in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for di in range(k):
                            for dj in range(k):
                                acc += w[co, ci, di, dj] * xp[ni, ci, i + di, j + dj]
                    out[ni, co, i, j] = acc
    return out


def ref_mu_law(x, mu):
    return np.log1p(mu * np.clip(x, 0.0, None)) / math.log1p(mu)


def ref_l1(pred, target):
    return np.mean(np.abs(pred - target))


def fd_grad(f, args, wrt, h=H_FD):
    """Central finite differences of scalar-valued f w.r.t. args[wrt]."""
    base = [np.array(a, dtype=np.float64) for a in args]
    grad = np.zeros_like(base[wrt])
    flat = base[wrt].ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*base)
        flat[i] = orig - h
        fm = f(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(analytic, reference):
    scale = max(1.0, float(np.max(np.abs(reference))))
    return float(np.max(np.abs(analytic - reference))) / scale


# ---------------------------------------------------------------------------
# Hand-computed value cases
# ---------------------------------------------------------------------------

class TestValues:
    def test_conv1x1_is_per_pixel_linear_map(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
        w = Tensor(np.array([[[[2.0]], [[3.0]]]], dtype=np.float32))  # 1 out, 2 in
        b = Tensor(np.array([0.5], dtype=np.float32))
        out = ad.conv2d(x, w, b)
        # out[c=0,i,j] = 2*x[0,i,j] + 3*x[1,i,j] + 0.5
        expected = 2 * x.data[0, 0] + 3 * x.data[0, 1] + 0.5
        assert np.allclose(out.data[0, 0], expected)

    def test_conv3x3_identity_kernel(self, rng):
        x = Tensor(rng.random((1, 3, 5, 5)).astype(np.float32))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        out = ad.conv2d(x, Tensor(w), None)
        assert np.array_equal(out.data, x.data)

    def test_relu_and_flips_hand_case(self):
        x = Tensor(np.array([[[[-1.0, 2.0], [3.0, -4.0]]]], dtype=np.float32))
        assert np.array_equal(ad.relu(x).data, [[[[0, 2], [3, 0]]]])
        assert np.array_equal(ad.flip_h(x).data, [[[[2, -1], [-4, 3]]]])
        assert np.array_equal(ad.flip_v(x).data, [[[[3, -4], [-1, 2]]]])

    def test_concat_slice_round_trip(self, rng):
        a = Tensor(rng.random((1, 2, 3, 3)).astype(np.float32))
        b = Tensor(rng.random((1, 3, 3, 3)).astype(np.float32))
        cat = ad.concat_channels([a, b])
        assert cat.shape == (1, 5, 3, 3)
        assert np.array_equal(ad.slice_channels(cat, 2, 5).data, b.data)

    def test_mu_law_endpoints_and_derivative_at_zero(self):
        mu = 5000.0
        x = Tensor(np.zeros((1, 1, 1, 1), dtype=np.float32), requires_grad=True)
        out = ad.mu_law_t(x, mu)
        assert out.data.item() == 0.0
        backward(ad.sum_all(out))
        assert x.grad.item() == pytest.approx(mu / math.log1p(mu), rel=1e-6)

    def test_l1_trivial_cases(self, rng):
        a = Tensor(rng.random((2, 3)).astype(np.float32))
        assert float(ad.l1_loss(a, Tensor(a.data.copy())).data) == 0.0
        p = Tensor(np.array([2.0], dtype=np.float32))
        t = Tensor(np.array([3.5], dtype=np.float32))
        assert float(ad.l1_loss(p, t).data) == pytest.approx(1.5)

    def test_l1_subgradient_zero_at_kink(self):
        p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        t = Tensor(np.array([1.0], dtype=np.float32))
        backward(ad.l1_loss(p, t))
        assert p.grad.item() == 0.0

    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.random((2, 3)).astype(np.float32), requires_grad=True)
        backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones_like(x.data))

    def test_mul_scalar_with_tensor_scale(self):
        x = Tensor(np.array([[1.0, 2.0]], dtype=np.float32), requires_grad=True)
        s = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
        out = ad.mul_scalar(x, s)
        assert np.allclose(out.data, [[3.0, 6.0]])
        backward(ad.sum_all(out))
        assert np.allclose(x.grad, 3.0)
        assert s.grad.item() == pytest.approx(3.0)  # sum(x)

    def test_backward_requires_scalar(self, rng):
        x = Tensor(rng.random((2, 2)).astype(np.float32), requires_grad=True)
        with pytest.raises(ValidationError):
            backward(ad.relu(x))

    def test_chain_of_two_scales_product_rule(self):
        x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
        out = ad.mul_scalar(ad.mul_scalar(x, 3.0), 5.0)
        backward(ad.sum_all(out))
        assert x.grad.item() == pytest.approx(15.0)

    def test_backward_accumulates_on_second_call(self):
        x = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
        loss = ad.sum_all(ad.mul_scalar(x, 2.0))
        backward(loss)
        first = x.grad.copy()
        loss2 = ad.sum_all(ad.mul_scalar(x, 2.0))
        backward(loss2)
        assert np.array_equal(x.grad, 2 * first)

    def test_conv_shape_errors(self, rng):
        x = Tensor(rng.random((1, 2, 4, 4)).astype(np.float32))
        w = Tensor(rng.random((3, 5, 1, 1)).astype(np.float32))
        with pytest.raises(ValidationError, match="channels"):
            ad.conv2d(x, w)


# ---------------------------------------------------------------------------
# Gradient checks (values also compared against the reference forward)
# ---------------------------------------------------------------------------

def check_conv(rng, k, wrt):
    n, cin, cout, h, w = 2, 3, 2, 4, 4
    x = rng.standard_normal((n, cin, h, w))
    wgt = rng.standard_normal((cout, cin, k, k)) * 0.5
    b = rng.standard_normal(cout) * 0.1

    xt = Tensor(x, requires_grad=(wrt == 0))
    wt = Tensor(wgt, requires_grad=(wrt == 1))
    bt = Tensor(b, requires_grad=(wrt == 2))
    out = ad.conv2d(xt, wt, bt)
    ref = ref_conv2d(xt.data.astype(np.float64), wt.data.astype(np.float64),
                     bt.data.astype(np.float64))
    assert rel_err(out.data, ref) < 1e-5
    backward(ad.sum_all(out))
    target = (xt, wt, bt)[wrt]
    fd = fd_grad(lambda a, ww, bb: np.sum(ref_conv2d(a, ww, bb)),
                 [xt.data, wt.data, bt.data], wrt)
    assert rel_err(target.grad, fd) < REL_TOL


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("wrt", [0, 1, 2])
def test_conv2d_gradcheck(rng, k, wrt):
    for _ in range(3):
        check_conv(rng, k, wrt)


def test_relu_gradcheck_away_from_kink(rng):
    for _ in range(5):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < KINK] = 0.5
        xt = Tensor(x, requires_grad=True)
        backward(ad.sum_all(ad.relu(xt)))
        fd = fd_grad(lambda a: np.sum(np.maximum(a, 0.0)), [xt.data], 0)
        assert rel_err(xt.grad, fd) < REL_TOL


def test_mu_law_gradcheck(rng):
    # keep x away from the high-curvature zone near 0, where the h=1e-3
    # central difference itself is inaccurate for large mu
    for mu, x_min in ((10.0, 0.01), (5000.0, 0.05)):
        x = rng.uniform(x_min, 1.0, (3, 3))
        xt = Tensor(x, requires_grad=True)
        backward(ad.sum_all(ad.mu_law_t(xt, mu)))
        fd = fd_grad(lambda a: np.sum(ref_mu_law(a, mu)), [xt.data], 0)
        assert rel_err(xt.grad, fd) < REL_TOL


def test_l1_gradcheck_away_from_kinks(rng):
    pred = rng.standard_normal((4, 4))
    target = pred + np.where(rng.standard_normal((4, 4)) > 0, 0.5, -0.5)
    pt = Tensor(pred, requires_grad=True)
    tt = Tensor(target, requires_grad=True)
    backward(ad.l1_loss(pt, tt))
    fd_p = fd_grad(lambda p, t: ref_l1(p, t), [pt.data, tt.data], 0)
    fd_t = fd_grad(lambda p, t: ref_l1(p, t), [pt.data, tt.data], 1)
    assert rel_err(pt.grad, fd_p) < REL_TOL
    assert rel_err(tt.grad, fd_t) < REL_TOL


def test_elementwise_ops_gradcheck(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    y = rng.standard_normal((1, 2, 3, 3))
    xt = Tensor(x, requires_grad=True)
    yt = Tensor(y, requires_grad=True)
    out = ad.add(ad.mul_scalar(ad.flip_h(xt), 2.5), ad.flip_v(yt))
    backward(ad.sum_all(out))

    def ref(a, b):
        return np.sum(2.5 * a[:, :, :, ::-1] + b[:, :, ::-1, :])

    assert rel_err(xt.grad, fd_grad(ref, [x, y], 0)) < REL_TOL
    assert rel_err(yt.grad, fd_grad(ref, [x, y], 1)) < REL_TOL


def test_concat_slice_gradcheck(rng):
    a = rng.standard_normal((1, 2, 2, 2))
    b = rng.standard_normal((1, 1, 2, 2))
    at = Tensor(a, requires_grad=True)
    bt = Tensor(b, requires_grad=True)
    out = ad.slice_channels(ad.concat_channels([at, bt]), 1, 3)
    backward(ad.sum_all(out))

    def ref(aa, bb):
        return np.sum(np.concatenate([aa, bb], axis=1)[:, 1:3])

    assert rel_err(at.grad, fd_grad(ref, [a, b], 0)) < REL_TOL
    assert rel_err(bt.grad, fd_grad(ref, [a, b], 1)) < REL_TOL


def test_three_layer_net_gradcheck(rng):
    x = rng.standard_normal((1, 2, 4, 4)) * 0.5
    w1 = rng.standard_normal((3, 2, 3, 3)) * 0.4
    w2 = rng.standard_normal((2, 3, 1, 1)) * 0.4
    w3 = rng.standard_normal((1, 2, 1, 1)) * 0.4
    tensors = [Tensor(v, requires_grad=True) for v in (w1, w2, w3)]
    xt = Tensor(x)

    h1 = ad.relu(ad.conv2d(xt, tensors[0]))
    h2 = ad.relu(ad.conv2d(h1, tensors[1]))
    loss = ad.sum_all(ad.conv2d(h2, tensors[2]))
    backward(loss)

    def ref(a, b, c):
        r1 = np.maximum(ref_conv2d(x, a, None), 0.0)
        r2 = np.maximum(ref_conv2d(r1, b, None), 0.0)
        return np.sum(ref_conv2d(r2, c, None))

    for i, t in enumerate(tensors):
        fd = fd_grad(ref, [w1, w2, w3], i)
        assert rel_err(t.grad, fd) < REL_TOL


def test_backward_deterministic(rng):
    x = rng.standard_normal((1, 2, 3, 3))
    w = rng.standard_normal((2, 2, 3, 3))

    def run():
        xt = Tensor(x, requires_grad=True)
        wt = Tensor(w, requires_grad=True)
        backward(ad.sum_all(ad.relu(ad.conv2d(xt, wt))))
        return xt.grad.copy(), wt.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0])
    assert np.array_equal(g1[1], g2[1])


def test_conv_linearity_superposition(rng):
    x1 = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    x2 = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32))
    out_sum = ad.conv2d(Tensor(x1 + x2), w).data
    out_parts = ad.conv2d(Tensor(x1), w).data + ad.conv2d(Tensor(x2), w).data
    assert np.allclose(out_sum, out_parts, atol=1e-5)


class TestAdam:
    def test_zero_grad_is_noop(self, rng):
        p = Tensor(rng.random(4).astype(np.float32))
        before = p.data.copy()
        state = AdamState()
        adam_step([p], [np.zeros(4)], state, lr=0.1)
        assert np.array_equal(p.data, before)

    def test_single_step_matches_hand_computation(self):
        p = Tensor(np.array([1.0], dtype=np.float32))
        g = np.array([0.5])
        state = AdamState()
        adam_step([p], [g], state, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8)
        # bias-corrected first step: mhat = g, vhat = g^2
        expected = 1.0 - 0.01 * 0.5 / (math.sqrt(0.25) + 1e-8)
        assert float(p.data[0]) == pytest.approx(expected, rel=1e-6)

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([0.0], dtype=np.float32))
        state = AdamState()
        for _ in range(500):
            g = 2.0 * (p.data.astype(np.float64) - 3.0)
            adam_step([p], [g], state, lr=0.05)
        assert (float(p.data[0]) - 3.0) ** 2 < 1e-4
