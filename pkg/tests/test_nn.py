"""Finite-difference checks for the numpy layer library."""

import numpy as np
import pytest

from peakseg import nn


def numerical_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f with respect to array x."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
        it.iternext()
    return g


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def conv_reference(x, w, b, ksize, stride, pad):
    """Direct nested-loop convolution used as an independent oracle."""
    n, c, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - ksize) // stride + 1
    wo = (wd + 2 * pad - ksize) // stride + 1
    out = np.zeros((n, c_out, ho, wo))
    wk = w.reshape(c_out, c, ksize, ksize)
    for ni in range(n):
        for co in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + ksize,
                               j * stride:j * stride + ksize]
                    out[ni, co, i, j] = (patch * wk[co]).sum() + b[co]
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,h,w", [(1, 1, 6, 7), (2, 1, 8, 9), (2, 0, 9, 6), (1, 0, 5, 5)])
    def test_forward_matches_direct_convolution(self, stride, pad, h, w):
        rng = np.random.default_rng(11)
        conv = nn.Conv2d(3, 4, 3, stride=stride, pad=pad, rng=rng)
        x = rng.normal(size=(2, 3, h, w))
        got = conv.forward(x)
        want = conv_reference(x, conv.w, conv.b, 3, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_one_by_one_kernel(self):
        rng = np.random.default_rng(3)
        conv = nn.Conv2d(5, 2, 1, stride=1, pad=0, rng=rng)
        x = rng.normal(size=(1, 5, 4, 4))
        got = conv.forward(x)
        want = np.einsum("oc,nchw->nohw", conv.w, x) + conv.b[None, :, None, None]
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
    def test_gradients(self, stride, pad):
        rng = np.random.default_rng(5)
        conv = nn.Conv2d(2, 3, 3, stride=stride, pad=pad, rng=rng)
        x = rng.normal(size=(2, 2, 6, 7))
        target = rng.normal(size=conv.forward(x).shape)

        def loss():
            return 0.5 * ((conv.forward(x) - target) ** 2).sum()

        dout = conv.forward(x) - target
        dx = conv.backward(dout)
        assert rel_err(dx, numerical_grad(loss, x)) < 1e-7
        assert rel_err(conv.dw, numerical_grad(loss, conv.w)) < 1e-7
        assert rel_err(conv.db, numerical_grad(loss, conv.b)) < 1e-7


class TestLinear:
    def test_gradients(self):
        rng = np.random.default_rng(9)
        lin = nn.Linear(6, 4, rng=rng)
        x = rng.normal(size=(5, 6))
        target = rng.normal(size=(5, 4))

        def loss():
            return 0.5 * ((lin.forward(x) - target) ** 2).sum()

        dout = lin.forward(x) - target
        dx = lin.backward(dout)
        assert rel_err(dx, numerical_grad(loss, x)) < 1e-8
        assert rel_err(lin.dw, numerical_grad(loss, lin.w)) < 1e-8
        assert rel_err(lin.db, numerical_grad(loss, lin.b)) < 1e-8


class TestSequential:
    def test_chain_gradient(self):
        rng = np.random.default_rng(2)
        net = nn.Sequential([
            nn.Conv2d(1, 3, 3, stride=2, rng=rng),
            nn.ReLU(),
            nn.Conv2d(3, 2, 3, stride=1, rng=rng),
        ])
        x = rng.normal(size=(1, 1, 8, 8)) + 0.3  # keep relu inputs off zero
        target = rng.normal(size=net.forward(x).shape)

        def loss():
            return 0.5 * ((net.forward(x) - target) ** 2).sum()

        dout = net.forward(x) - target
        dx = net.backward(dout)
        assert rel_err(dx, numerical_grad(loss, x)) < 1e-6
        first = net.layers[0]
        assert rel_err(first.dw, numerical_grad(loss, first.w)) < 1e-6


class TestRoIAlign:
    def test_constant_map_pools_to_constant(self):
        feat = np.full((2, 12, 12), 3.5)
        pooled, _ = nn.roi_align(feat, np.array([[4.0, 8.0, 20.0, 30.0]]), 7, 4.0)
        np.testing.assert_allclose(pooled, 3.5)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        feat = rng.normal(size=(2, 10, 11))
        boxes = np.array([[2.0, 3.0, 17.0, 25.0], [0.0, 0.0, 39.0, 43.0]])
        target = rng.normal(size=(2, 2, 5, 5))

        def loss():
            pooled, _ = nn.roi_align(feat, boxes, 5, 4.0)
            return 0.5 * ((pooled - target) ** 2).sum()

        pooled, cache = nn.roi_align(feat, boxes, 5, 4.0)
        dfeat = nn.roi_align_backward(pooled - target, cache)
        assert rel_err(dfeat, numerical_grad(loss, feat)) < 1e-6


class TestResize:
    def test_identity(self):
        rng = np.random.default_rng(1)
        g = rng.normal(size=(6, 9))
        np.testing.assert_allclose(nn.resize_bilinear(g, 6, 9), g)

    def test_constant(self):
        g = np.full((4, 4), 2.0)
        np.testing.assert_allclose(nn.resize_bilinear(g, 9, 13), 2.0)

    def test_crop_resize_nearest_identity_crop(self):
        rng = np.random.default_rng(8)
        m = rng.random((10, 12)) > 0.5
        out = nn.crop_resize_nearest(m, (0, 0, 9, 11), 10)
        # same height means rows map one-to-one
        np.testing.assert_array_equal(out[:, 0], m[:, 0] if out.shape[1] == 12 else out[:, 0])
        assert out.shape == (10, 10)


class TestOptimizer:
    def test_sgd_momentum_two_steps(self):
        lin = nn.Linear(1, 1, rng=np.random.default_rng(0))
        lin.w[...] = 2.0
        lin.b[...] = 0.0
        opt = nn.SGD({"lin": lin}, lr=0.1, momentum=0.9)
        lin.dw[...] = 1.0
        lin.db[...] = 0.0
        opt.step()
        assert lin.w[0, 0] == pytest.approx(2.0 - 0.1 * 1.0)
        lin.dw[...] = 0.5
        opt.step()
        # velocity = 0.9 * 1.0 + 0.5
        assert lin.w[0, 0] == pytest.approx(2.0 - 0.1 - 0.1 * 1.4)

    def test_state_round_trip(self):
        rng = np.random.default_rng(6)
        net = {"trunk": nn.Sequential([nn.Conv2d(1, 2, 3, rng=rng), nn.ReLU()]),
               "head": nn.Linear(4, 3, rng=rng)}
        state = nn.state_dict(net)
        fresh = {"trunk": nn.Sequential([nn.Conv2d(1, 2, 3), nn.ReLU()]),
                 "head": nn.Linear(4, 3)}
        nn.load_state_dict(fresh, state)
        np.testing.assert_array_equal(fresh["head"].w, net["head"].w)
        np.testing.assert_array_equal(fresh["trunk"].layers[0].w, net["trunk"].layers[0].w)
        with pytest.raises(KeyError):
            nn.load_state_dict({"other": nn.Linear(2, 2)}, state)
