"""Kernel-level checks against independent references.

The convolution oracle below is a quadruple loop written straight from
the definition; gradients are checked against central finite differences
in float64.  Neither shares code with the implementation.
"""

import numpy as np
import pytest

from ldfc.errors import ShapeError
from ldfc.tensor import (ConvSpec, add, avg_pool, conv2d_backward,
                         conv2d_forward, elementwise_scale, relu, relu_grad)


def naive_conv(x, w, b, stride, padding, groups):
    n, ci, h, wid = x.shape
    co, cig, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, ci, h + 2 * ph, wid + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + wid] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wid + 2 * pw - kw) // sw + 1
    cog = co // groups
    out = np.zeros((n, co, ho, wo))
    for nn in range(n):
        for o in range(co):
            g = o // cog
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cig):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += (w[o, c, a, bb]
                                        * xp[nn, g * cig + c,
                                             i * sh + a, j * sw + bb])
                    out[nn, o, i, j] = acc + b[o]
    return out


CASES = [
    # (n, ci, h, w, co, kh, kw, stride, padding, groups)
    (2, 3, 5, 5, 4, 3, 3, (1, 1), (1, 1), 1),
    (1, 4, 6, 7, 6, 3, 2, (2, 1), (0, 1), 2),
    (2, 6, 4, 4, 6, 3, 3, (1, 1), (1, 1), 6),   # depthwise
    (1, 2, 1, 1, 5, 1, 1, (1, 1), (0, 0), 1),   # linear as 1x1 conv
    (1, 3, 8, 8, 2, 5, 5, (3, 3), (2, 2), 1),
]


@pytest.mark.parametrize("case", CASES)
def test_conv_forward_matches_naive(case):
    n, ci, h, w, co, kh, kw, stride, padding, groups = case
    rng = np.random.default_rng(7)
    x = rng.standard_normal((n, ci, h, w))
    wt = rng.standard_normal((co, ci // groups, kh, kw))
    b = rng.standard_normal(co)
    got = conv2d_forward(x, ConvSpec(wt, b, stride, padding, groups))
    want = naive_conv(x, wt, b, stride, padding, groups)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("case", CASES)
def test_conv_backward_matches_finite_differences(case):
    n, ci, h, w, co, kh, kw, stride, padding, groups = case
    rng = np.random.default_rng(11)
    x = rng.standard_normal((n, ci, h, w))
    wt = 0.5 * rng.standard_normal((co, ci // groups, kh, kw))
    b = rng.standard_normal(co)
    spec = ConvSpec(wt, b, stride, padding, groups)
    t = rng.standard_normal(conv2d_forward(x, spec).shape)

    def loss(xx, ww, bb):
        out = conv2d_forward(xx, ConvSpec(ww, bb, stride, padding, groups))
        return float(np.sum(out * t))

    gx, gw, gb = conv2d_backward(x, spec, t)
    eps = 1e-5
    for arr, grad, name in ((x, gx, "x"), (wt, gw, "w"), (b, gb, "b")):
        flat = arr.ravel()
        idx = rng.choice(flat.size, size=min(20, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(x, wt, b)
            flat[i] = orig - eps
            dn = loss(x, wt, b)
            flat[i] = orig
            fd = (up - dn) / (2 * eps)
            assert abs(fd - grad.ravel()[i]) <= 1e-4 * max(1.0, abs(fd)), (
                f"{name}[{i}]: analytic {grad.ravel()[i]} vs fd {fd}")


def test_conv_accumulates_beyond_float32():
    # many same-sign products: float32 accumulation would drift
    x = np.full((1, 1, 1, 4096), 0.1, dtype=np.float32)
    w = np.full((1, 1, 1, 4096), 0.1, dtype=np.float32)
    out = conv2d_forward(x, ConvSpec(w, np.zeros(1, dtype=np.float32)))
    want = 4096 * np.float64(np.float32(0.1)) ** 2
    assert abs(float(out[0, 0, 0, 0]) - want) < 1e-3 * want


def test_conv_shape_errors_name_the_layer():
    spec = ConvSpec(np.zeros((2, 3, 3, 3), dtype=np.float32),
                    np.zeros(2, dtype=np.float32), label="blk7")
    with pytest.raises(ShapeError, match="blk7"):
        conv2d_forward(np.zeros((1, 4, 5, 5), dtype=np.float32), spec)
    with pytest.raises(ShapeError, match="blk7"):
        conv2d_forward(np.zeros((1, 3, 2, 2), dtype=np.float32), spec)
    bad = ConvSpec(np.zeros((2, 3, 3, 3), dtype=np.float32),
                   np.zeros(3, dtype=np.float32), label="blk8")
    with pytest.raises(ShapeError, match="blk8"):
        conv2d_forward(np.zeros((1, 3, 5, 5), dtype=np.float32), bad)


def test_avg_pool_matches_mean():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 6, 4))
    out = avg_pool(x, (2, 2))
    assert out.shape == (2, 3, 3, 2)
    assert np.allclose(out[1, 2, 0, 1], x[1, 2, 0:2, 2:4].mean())
    with pytest.raises(ShapeError):
        avg_pool(x, (4, 4))


def test_relu_and_grad():
    x = np.array([[-1.0, 0.0, 2.0]]).reshape(1, 1, 1, 3)
    g = np.ones_like(x)
    assert np.array_equal(relu(x).ravel(), [0, 0, 2])
    assert np.array_equal(relu_grad(x, g).ravel(), [0, 0, 1])


def test_add_and_scale_shape_checks():
    a = np.zeros((1, 2, 3, 3))
    with pytest.raises(ShapeError):
        add(a, np.zeros((1, 2, 3, 4)))
    with pytest.raises(ShapeError):
        elementwise_scale(a, np.ones(3))
    out = elementwise_scale(a + 1.0, np.array([2.0, 3.0]))
    assert np.array_equal(out[0, :, 0, 0], [2.0, 3.0])
