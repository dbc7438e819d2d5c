"""Dense NCHW tensor kernels.

Tensors are plain numpy arrays in NCHW layout; weights are
[c_out, c_in // groups, k_h, k_w].  Convolutions lower to im2col and a
single matmul per group, accumulating in float64 regardless of carrier
dtype, and cast back to the input dtype on the way out.  The backward
pass mirrors the lowering exactly (col2im scatter), so gradients are the
true gradients of the forward implementation, not of an idealized one.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


@dataclass
class ConvSpec:
    """A convolution/linear parameterization.

    A linear layer is represented as a 1x1 convolution over a 1x1 spatial
    extent; no separate code path exists.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    groups: int = 1
    label: str = ""

    def validate(self):
        w, b = self.weight, self.bias
        if w.ndim != 4:
            raise ShapeError(f"{self._who()}: weight must be 4-d, got shape {w.shape}")
        co, cig, kh, kw = w.shape
        if b.ndim != 1 or b.shape[0] != co:
            raise ShapeError(
                f"{self._who()}: bias length {b.shape} does not match {co} output channels")
        if self.groups < 1 or co % self.groups != 0:
            raise ShapeError(
                f"{self._who()}: groups={self.groups} does not divide c_out={co}")
        if any(s < 1 for s in self.stride) or any(p < 0 for p in self.padding):
            raise ShapeError(f"{self._who()}: bad stride/padding "
                             f"{self.stride}/{self.padding}")

    def _who(self):
        return self.label or "conv"

    @property
    def c_out(self):
        return self.weight.shape[0]

    @property
    def c_in(self):
        return self.weight.shape[1] * self.groups

    def out_shape(self, in_shape):
        """Spatial output shape for input (c, h, w); raises on mismatch."""
        c, h, w = in_shape
        if c != self.c_in:
            raise ShapeError(f"{self._who()}: expects {self.c_in} input channels, "
                             f"got {c}")
        _, _, kh, kw = self.weight.shape
        sh, sw = self.stride
        ph, pw = self.padding
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(f"{self._who()}: kernel {kh}x{kw} does not fit input "
                             f"{h}x{w} with padding {self.padding}")
        return (self.c_out, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def _im2col(x, kh, kw, stride, padding):
    """Return patches [n, c, kh, kw, ho, wo] as float64."""
    n, c, h, w = x.shape
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: [n, c, h', w', kh, kw]; subsample window origins by stride
    win = win[:, :, ::sh, ::sw]
    return win.transpose(0, 1, 4, 5, 2, 3).astype(np.float64)


def conv2d_forward(x, spec: ConvSpec):
    """Grouped 2-d convolution, float64 accumulation."""
    spec.validate()
    if x.ndim != 4:
        raise ShapeError(f"{spec._who()}: input must be 4-d, got shape {x.shape}")
    co, ho, wo = spec.out_shape(x.shape[1:])
    n = x.shape[0]
    g = spec.groups
    cig = spec.weight.shape[1]
    _, _, kh, kw = spec.weight.shape
    cols = _im2col(x, kh, kw, spec.stride, spec.padding)
    cols = cols.reshape(n, g, cig * kh * kw, ho * wo)
    wmat = spec.weight.reshape(g, co // g, cig * kh * kw).astype(np.float64)
    out = np.einsum("gok,ngkp->ngop", wmat, cols, optimize=True)
    out = out.reshape(n, co, ho, wo) + spec.bias.astype(np.float64).reshape(1, co, 1, 1)
    return out.astype(x.dtype)


def conv2d_backward(x, spec: ConvSpec, grad_out, need_input=True):
    """Gradients of conv2d_forward.

    Returns (grad_input, grad_weight, grad_bias); grad_input is None when
    need_input is False (saves the col2im scatter in layer training).
    """
    spec.validate()
    n, ci, h, w = x.shape
    co, cig, kh, kw = spec.weight.shape
    g = spec.groups
    _, ho, wo = spec.out_shape(x.shape[1:])
    if grad_out.shape != (n, co, ho, wo):
        raise ShapeError(f"{spec._who()}: grad shape {grad_out.shape} does not match "
                         f"output {(n, co, ho, wo)}")
    go = grad_out.astype(np.float64).reshape(n, g, co // g, ho * wo)
    cols = _im2col(x, kh, kw, spec.stride, spec.padding)
    cols = cols.reshape(n, g, cig * kh * kw, ho * wo)
    grad_w = np.einsum("ngop,ngkp->gok", go, cols, optimize=True)
    grad_w = grad_w.reshape(co, cig, kh, kw).astype(spec.weight.dtype)
    grad_b = grad_out.astype(np.float64).sum(axis=(0, 2, 3)).astype(spec.bias.dtype)
    if not need_input:
        return None, grad_w, grad_b
    wmat = spec.weight.reshape(g, co // g, cig * kh * kw).astype(np.float64)
    gcols = np.einsum("gok,ngop->ngkp", wmat, go, optimize=True)
    gcols = gcols.reshape(n, g * cig, kh, kw, ho, wo)
    sh, sw = spec.stride
    ph, pw = spec.padding
    gx = np.zeros((n, ci, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, :, i, j]
    if ph or pw:
        gx = gx[:, :, ph:h + ph, pw:w + pw]
    return gx.astype(x.dtype), grad_w, grad_b


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, grad_out):
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype)


def avg_pool(x, window):
    """Non-overlapping average pooling; window must tile the input."""
    wh, ww = window
    if wh < 1 or ww < 1:
        raise ShapeError(f"bad pool window {window}")
    n, c, h, w = x.shape
    if h % wh or w % ww:
        raise ShapeError(f"pool window {window} does not tile input {h}x{w}")
    r = x.reshape(n, c, h // wh, wh, w // ww, ww)
    return r.mean(axis=(3, 5), dtype=np.float64).astype(x.dtype)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: operand shapes differ, {a.shape} vs {b.shape}")
    return a + b


def elementwise_scale(x, v):
    """Scale each channel of x by v (length-c vector)."""
    if v.ndim != 1 or v.shape[0] != x.shape[1]:
        raise ShapeError(f"scale vector length {v.shape} does not match "
                         f"{x.shape[1]} channels")
    return (x * v.reshape(1, -1, 1, 1)).astype(x.dtype)
