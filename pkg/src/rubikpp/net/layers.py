"""3D convolution and transposed convolution with hand-written gradients.

Tensors are ``(N, C, D, H, W)`` numpy arrays.  Convolution weights are
``(out, in, kz, ky, kx)``; transposed-convolution weights follow the usual
``(in, out, kz, ky, kx)`` layout so that ``deconv(.; w)`` is exactly the
adjoint of ``conv(.; w)`` when biases are zero.

Computation follows the dtype of the inputs, so float64 arrays give a
float64 forward/backward pass for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


def _triple(v) -> Tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ShapeError("shape error: expected a scalar or three values")
    return t


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int, int] = (3, 3, 3)
    stride: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        if min(self.kernel) < 1 or self.stride < 1 or self.padding < 0:
            raise ShapeError("shape error: kernel and stride must be >= 1, padding >= 0")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ShapeError("shape error: channel counts must be >= 1")

    @property
    def weight_shape(self) -> Tuple[int, ...]:
        if self.transposed:
            return (self.in_channels, self.out_channels) + self.kernel
        return (self.out_channels, self.in_channels) + self.kernel

    @property
    def fan_in(self) -> int:
        k = int(np.prod(self.kernel))
        if self.transposed:
            return max(1, self.in_channels * k // self.stride ** 3)
        return self.in_channels * k

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels

    def output_spatial(self, spatial) -> Tuple[int, int, int]:
        s, p = self.stride, self.padding
        out = []
        for n, k in zip(spatial, self.kernel):
            if self.transposed:
                o = (n - 1) * s - 2 * p + k
            else:
                if n + 2 * p < k:
                    raise ShapeError(f"shape error: input extent {n} too small for kernel {k}")
                o = (n + 2 * p - k) // s + 1
            if o < 1:
                raise ShapeError("shape error: empty output")
            out.append(o)
        return tuple(out)


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _im2col(x, kernel, s, p):
    """Column matrix of shape ``(C * kz * ky * kx, N * Do * Ho * Wo)``."""
    xp = _pad(x, p)
    win = sliding_window_view(xp, kernel, axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    c = x.shape[1]
    return np.ascontiguousarray(win.transpose(1, 5, 6, 7, 0, 2, 3, 4)).reshape(c * int(np.prod(kernel)), -1)


def _conv_lin(x, w, s, p, cols=None):
    """Bias-free cross-correlation; ``w`` is ``(O, C, k...)``."""
    if cols is None:
        cols = _im2col(x, w.shape[2:], s, p)
    n = x.shape[0]
    out_spatial = tuple((d + 2 * p - k) // s + 1 for d, k in zip(x.shape[2:], w.shape[2:]))
    y = (w.reshape(w.shape[0], -1) @ cols).reshape((w.shape[0], n) + out_spatial)
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3, 4))


def _conv_adj(gy, w, s, p, in_spatial):
    """Adjoint of ``_conv_lin`` w.r.t. its input, for an input of ``in_spatial``."""
    n, o = gy.shape[:2]
    c = w.shape[1]
    kz, ky, kx = w.shape[2:]
    do, ho, wo = gy.shape[2:]
    gy_t = gy.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    dcols = (w.reshape(o, -1).T @ gy_t).reshape(c, kz, ky, kx, n, do, ho, wo)
    dp, hp, wp = (d + 2 * p for d in in_spatial)
    dxp = np.zeros((c, n, dp, hp, wp), dtype=dcols.dtype)
    for a in range(kz):
        for b in range(ky):
            for e in range(kx):
                dxp[:, :, a:a + s * (do - 1) + 1:s, b:b + s * (ho - 1) + 1:s, e:e + s * (wo - 1) + 1:s] += dcols[
                    :, a, b, e
                ]
    if p:
        dxp = dxp[:, :, p:-p, p:-p, p:-p]
    return np.ascontiguousarray(dxp.transpose(1, 0, 2, 3, 4))


def _conv_wgrad(x, gy, kernel, s, p, cols=None):
    if cols is None:
        cols = _im2col(x, kernel, s, p)
    o = gy.shape[1]
    gy_t = gy.transpose(1, 0, 2, 3, 4).reshape(o, -1)
    return (gy_t @ cols.T).reshape((o, x.shape[1]) + tuple(kernel))


def _check_input(x, spec: ConvSpec, w, b):
    if x.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"shape error: input {x.shape} does not match {spec.in_channels} channels")
    if w.shape != spec.weight_shape or b.shape != (spec.out_channels,):
        raise ShapeError(f"shape error: weight {w.shape} / bias {b.shape} do not match {spec}")


def conv3d_forward(x: np.ndarray, spec: ConvSpec, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strided, zero-padded 3D cross-correlation plus bias."""
    _check_input(x, spec, w, b)
    spec.output_spatial(x.shape[2:])
    y = _conv_lin(x, w, spec.stride, spec.padding)
    y += b.reshape(1, -1, 1, 1, 1)
    return y


def conv3d_backward(x, spec: ConvSpec, w, b, gy):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    _check_input(x, spec, w, b)
    expected = (x.shape[0], spec.out_channels) + spec.output_spatial(x.shape[2:])
    if gy.shape != expected:
        raise ShapeError(f"shape error: upstream gradient {gy.shape}, expected {expected}")
    gx = _conv_adj(gy, w, spec.stride, spec.padding, x.shape[2:])
    gw = _conv_wgrad(x, gy, spec.kernel, spec.stride, spec.padding)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def deconv3d_forward(x, spec: ConvSpec, w, b) -> np.ndarray:
    """Transposed convolution: output extent ``(n - 1) * stride - 2 * padding + k``."""
    _check_input(x, spec, w, b)
    out_spatial = spec.output_spatial(x.shape[2:])
    y = _conv_adj(x, w, spec.stride, spec.padding, out_spatial)
    y += b.reshape(1, -1, 1, 1, 1)
    return y


def deconv3d_backward(x, spec: ConvSpec, w, b, gy):
    _check_input(x, spec, w, b)
    expected = (x.shape[0], spec.out_channels) + spec.output_spatial(x.shape[2:])
    if gy.shape != expected:
        raise ShapeError(f"shape error: upstream gradient {gy.shape}, expected {expected}")
    gx = _conv_lin(gy, w, spec.stride, spec.padding)
    gw = _conv_wgrad(gy, x, spec.kernel, spec.stride, spec.padding)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def layer_forward(x, spec: ConvSpec, w, b):
    """Forward pass returning ``(y, cols)``; ``cols`` is reused by :func:`layer_backward`."""
    if spec.transposed:
        return deconv3d_forward(x, spec, w, b), None
    _check_input(x, spec, w, b)
    spec.output_spatial(x.shape[2:])
    cols = _im2col(x, spec.kernel, spec.stride, spec.padding)
    y = _conv_lin(x, w, spec.stride, spec.padding, cols)
    y += b.reshape(1, -1, 1, 1, 1)
    return y, cols


def layer_backward(x, spec: ConvSpec, w, b, gy, cols=None):
    if spec.transposed:
        return deconv3d_backward(x, spec, w, b, gy)
    if cols is None:
        return conv3d_backward(x, spec, w, b, gy)
    gx = _conv_adj(gy, w, spec.stride, spec.padding, x.shape[2:])
    gw = _conv_wgrad(x, gy, spec.kernel, spec.stride, spec.padding, cols)
    return gx, gw, gy.sum(axis=(0, 2, 3, 4))


# --- pointwise ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def leaky_relu(x, slope=0.2):
    return np.where(x > 0, x, x * slope)


def activation_grad(pre, gy, slope):
    """Gradient through ReLU (``slope == 0``) or leaky ReLU."""
    if slope == 0:
        return np.where(pre > 0, gy, 0).astype(gy.dtype)
    return np.where(pre > 0, gy, gy * slope).astype(gy.dtype)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
