"""Convolutional building blocks with hand-written backward passes.

All spatial operators follow the cross-correlation convention (no kernel
flip) and pad with zeros. Activations live in (batch, channel, height,
width) order. Convolutions are evaluated as batched matrix products over an
im2col layout, which keeps the heavy lifting inside BLAS; the backward
passes reuse the same layout and are validated against the central
difference oracle in numcore.

Each layer stores its parameters as plain numpy arrays. ``backward`` style
methods take the forward input (or a cache from ``forward_cols``) plus the
output gradient and return input and parameter gradients in matching
shapes.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, LabelError


def glorot_init(shape, prng, dtype=np.float32):
    """Uniform samples in +-sqrt(6/(fan_in+fan_out)) for rank-2/4 shapes.

    For rank-4 weights the receptive field multiplies both fans, so the
    bound only depends on (shape[0]+shape[1]) * kh * kw and is valid for
    either (out, in, kh, kw) or (in, out, kh, kw) orderings.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        fan_sum = shape[0] + shape[1]
    elif len(shape) == 4:
        fan_sum = (shape[0] + shape[1]) * shape[2] * shape[3]
    else:
        raise DimensionError(
            "glorot_init expects a rank-2 or rank-4 shape, got %r" % (shape,)
        )
    bound = math.sqrt(6.0 / fan_sum)
    return prng.uniform(-bound, bound, size=shape, dtype=dtype)


def _im2col(x, kernel, stride, padding):
    """Unfold (B,C,H,W) into (B, C*k*k, P) patch columns plus output dims."""
    b, c, h, w = x.shape
    if kernel == 1 and stride == 1 and padding == 0:
        return x.reshape(b, c, h * w), h, w
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = x.shape[2], x.shape[3]
    if (hp - kernel) % stride or (wp - kernel) % stride:
        raise DimensionError(
            "spatial size %dx%d (padding %d) is not divisible for kernel %d stride %d"
            % (h, w, padding, kernel, stride)
        )
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = as_strided(
        x,
        (b, c, kernel, kernel, ho, wo),
        (s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return view.reshape(b, c * kernel * kernel, ho * wo), ho, wo


def _col2im(gcols, x_shape, kernel, stride, padding):
    """Adjoint of _im2col: scatter-add patch columns back onto the grid."""
    b, c, h, w = x_shape
    if kernel == 1 and stride == 1 and padding == 0:
        return gcols.reshape(b, c, h, w)
    hp, wp = h + 2 * padding, w + 2 * padding
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    g = gcols.reshape(b, c, kernel, kernel, ho, wo)
    gx = np.zeros((b, c, hp, wp), dtype=gcols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g[:, :, i, j]
    if padding:
        gx = gx[:, :, padding:padding + h, padding:padding + w]
    return gx


class Conv2d:
    """2D convolution (cross-correlation) with zero padding and bias."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=1,
                 prng=None, dtype=np.float32):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        shape = (self.out_ch, self.in_ch, self.kernel, self.kernel)
        if prng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = glorot_init(shape, prng, dtype)
        self.bias = np.zeros(self.out_ch, dtype=dtype)

    def _check(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(
                "conv expects (B,%d,H,W), got %s" % (self.in_ch, (x.shape,))
            )

    def forward_cols(self, x):
        """Forward pass that also returns the im2col buffer for backward."""
        self._check(x)
        cols, ho, wo = _im2col(x, self.kernel, self.stride, self.padding)
        wm = self.weight.reshape(self.out_ch, -1)
        y = np.matmul(wm, cols)
        y += self.bias[:, None]
        return y.reshape(x.shape[0], self.out_ch, ho, wo), cols

    def forward(self, x):
        y, _ = self.forward_cols(x)
        return y

    def backward_cols(self, cols, x_shape, grad_out):
        b = x_shape[0]
        g = grad_out.reshape(b, self.out_ch, -1)
        grad_b = g.sum(axis=(0, 2))
        grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
        grad_w = grad_w.reshape(self.weight.shape)
        wm = self.weight.reshape(self.out_ch, -1)
        gcols = np.matmul(wm.T, g)
        grad_x = _col2im(gcols, x_shape, self.kernel, self.stride, self.padding)
        return grad_x, grad_w, grad_b

    def backward(self, x, grad_out):
        self._check(x)
        cols, _, _ = _im2col(x, self.kernel, self.stride, self.padding)
        return self.backward_cols(cols, x.shape, grad_out)

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def conv2d_forward(layer, x):
    return layer.forward(np.asarray(x))


def conv2d_backward(layer, x, grad_out):
    return layer.backward(np.asarray(x), np.asarray(grad_out))


class Dense:
    """Fully connected layer: y = x W^T + b with weight shaped (out, in)."""

    def __init__(self, in_dim, out_dim, prng=None, dtype=np.float32):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        if prng is None:
            self.weight = np.zeros((self.out_dim, self.in_dim), dtype=dtype)
        else:
            self.weight = glorot_init((self.out_dim, self.in_dim), prng, dtype)
        self.bias = np.zeros(self.out_dim, dtype=dtype)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                "dense expects (B,%d), got %s" % (self.in_dim, (x.shape,))
            )
        return x @ self.weight.T + self.bias

    def backward(self, x, grad_out):
        grad_w = grad_out.T @ x
        grad_b = grad_out.sum(axis=0)
        grad_x = grad_out @ self.weight
        return grad_x, grad_w, grad_b

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


class TransposedConv2d:
    """Stride-2 transposed 3x3 convolution that exactly doubles H and W.

    Weight is shaped (in_ch, out_ch, kh, kw). Forward stamps each input
    pixel's weighted kernel onto a stride-spaced grid, then crops by the
    padding and extends by the output padding, the adjoint of a padded
    strided convolution.
    """

    def __init__(self, in_ch, out_ch, kernel=3, stride=2, padding=1,
                 output_padding=1, prng=None, dtype=np.float32):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        self.padding = int(padding)
        self.output_padding = int(output_padding)
        shape = (self.in_ch, self.out_ch, self.kernel, self.kernel)
        if prng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = glorot_init(shape, prng, dtype)
        self.bias = np.zeros(self.out_ch, dtype=dtype)

    def out_size(self, h, w):
        k, s, p, op = self.kernel, self.stride, self.padding, self.output_padding
        return (h - 1) * s - 2 * p + k + op, (w - 1) * s - 2 * p + k + op

    def _stamp_grid(self, h, w):
        k, s = self.kernel, self.stride
        return (h - 1) * s + k, (w - 1) * s + k

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise DimensionError(
                "transposed conv expects (B,%d,H,W), got %s" % (self.in_ch, (x.shape,))
            )
        b, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        hf, wf = self._stamp_grid(h, w)
        ho, wo = self.out_size(h, w)
        if ho + p > hf or wo + p > wf:
            raise DimensionError(
                "output padding %d exceeds stamp grid for input %dx%d"
                % (self.output_padding, h, w)
            )
        xm = x.reshape(b, self.in_ch, h * w)
        wm = self.weight.reshape(self.in_ch, self.out_ch * k * k)
        prod = np.matmul(wm.T, xm).reshape(b, self.out_ch, k, k, h, w)
        full = np.zeros((b, self.out_ch, hf, wf), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                full[:, :, i:i + s * h:s, j:j + s * w:s] += prod[:, :, i, j]
        y = full[:, :, p:p + ho, p:p + wo] + self.bias[:, None, None]
        return y

    def backward(self, x, grad_out):
        b, _, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        hf, wf = self._stamp_grid(h, w)
        ho, wo = self.out_size(h, w)
        grad_b = grad_out.sum(axis=(0, 2, 3))
        full = np.zeros((b, self.out_ch, hf, wf), dtype=grad_out.dtype)
        full[:, :, p:p + ho, p:p + wo] = grad_out
        gprod = np.empty((b, self.out_ch, k, k, h, w), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gprod[:, :, i, j] = full[:, :, i:i + s * h:s, j:j + s * w:s]
        gp = gprod.reshape(b, self.out_ch * k * k, h * w)
        wm = self.weight.reshape(self.in_ch, self.out_ch * k * k)
        grad_x = np.matmul(wm, gp).reshape(x.shape)
        xm = x.reshape(b, self.in_ch, h * w)
        grad_w = np.matmul(xm, gp.transpose(0, 2, 1)).sum(axis=0)
        grad_w = grad_w.reshape(self.weight.shape)
        return grad_x, grad_w, grad_b

    def params(self):
        return [("weight", self.weight), ("bias", self.bias)]


def transposed_conv2d_forward(layer, x):
    return layer.forward(np.asarray(x))


def maxpool2d(x):
    """2x2 max pooling with stride 2.

    Returns the pooled map plus per-window argmax indices (0..3, row-major
    inside the window, first occurrence on ties) for backward routing.
    """
    if x.ndim != 4:
        raise DimensionError("maxpool expects (B,C,H,W), got rank %d" % x.ndim)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError("maxpool needs even spatial dims, got %dx%d" % (h, w))
    win = (
        x.reshape(b, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(grad_out, idx):
    """Scatter each output gradient to its recorded argmax position."""
    b, c, ho, wo = grad_out.shape
    g = np.zeros((b, c, ho, wo, 4), dtype=grad_out.dtype)
    np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
    return (
        g.reshape(b, c, ho, wo, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, 2 * ho, 2 * wo)
    )


def cross_entropy_2class(logits, target, pos_weight=None):
    """Mean softmax cross-entropy over two channels.

    Returns (loss, grad wrt logits). ``pos_weight`` optionally scales the
    contribution of class-1 pixels; the loss is then a weighted mean so its
    scale stays comparable to the unweighted case.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise DimensionError("loss expects logits (B,2,H,W), got %s" % (logits.shape,))
    b, _, h, w = logits.shape
    if target.shape != (b, h, w):
        raise DimensionError(
            "target shape %s does not match logits %s" % (target.shape, logits.shape)
        )
    if not (np.equal(target, 0) | np.equal(target, 1)).all():
        raise LabelError("target labels must be 0 or 1")
    t = target.astype(np.int64)[:, None]
    m = logits.max(axis=1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = (lse - np.take_along_axis(z, t, axis=1))[:, 0]
    prob = np.exp(z - lse)
    grad = prob.astype(logits.dtype, copy=True)
    picked = np.take_along_axis(grad, t, axis=1)
    np.put_along_axis(grad, t, picked - 1.0, axis=1)
    if pos_weight is None:
        loss = float(nll.mean())
        grad /= b * h * w
    else:
        wmap = np.where(target == 1, float(pos_weight), 1.0)
        total = wmap.sum()
        loss = float((nll * wmap).sum() / total)
        grad *= (wmap / total)[:, None]
    return loss, grad
