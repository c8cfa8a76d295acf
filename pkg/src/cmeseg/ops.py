"""Dense 4-D tensors and the forward/backward layer primitives.

Layout is (batch, channel, height, width) throughout. Ops are pure: they
never mutate their inputs and always allocate fresh outputs, so concurrent
calls are safe. Gradients are exact; every differentiable op here is
covered by central finite-difference checks in the test suite.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import ShapeMismatch, UnsupportedGeometry


class Tensor:
    """Dense N-d array with an optional same-shaped gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        if grad is not None:
            grad = np.asarray(grad)
            if grad.shape != self.data.shape:
                raise ShapeMismatch(
                    f"grad shape {grad.shape} != data shape {self.data.shape}")
        self.grad = grad

    @property
    def dims(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(dims={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class ConvParams:
    """Convolution parameters: kernel (OC,IC,KH,KW), per-channel bias."""

    kernel: Tensor
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        k = self.kernel.data
        if k.ndim != 4 or min(k.shape) < 1:
            raise ShapeMismatch(f"kernel dims must be 4 positive extents, got {k.shape}")
        if self.stride < 1:
            raise ShapeMismatch(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ShapeMismatch(f"padding must be >= 0, got {self.padding}")
        self.bias = np.asarray(self.bias)
        # conv kernels are (OC,IC,kh,kw), transposed ones (CIN,COUT,kh,kw);
        # the op itself pins down which axis the bias must match
        if self.bias.ndim != 1 or self.bias.shape[0] not in (k.shape[0], k.shape[1]):
            raise ShapeMismatch(
                f"bias shape {self.bias.shape} matches neither kernel axis "
                f"of {k.shape}")


def _pad_spatial(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _conv_out_extent(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation with zero padding (no kernel flip)."""
    b, c, h, w = x.dims
    oc, ic, kh, kw = p.kernel.dims
    if c != ic:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {ic}")
    if p.bias.shape != (oc,):
        raise ShapeMismatch(f"bias shape {p.bias.shape} != ({oc},)")
    oh = _conv_out_extent(h, kh, p.stride, p.padding)
    ow = _conv_out_extent(w, kw, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise ShapeMismatch(
            f"conv output extent {oh}x{ow} < 1 for input {h}x{w}")
    xp = np.ascontiguousarray(_pad_spatial(x.data, p.padding))
    return Tensor(kernels.conv2d_forward(xp, p.kernel.data, p.bias, p.stride))


def conv2d_backward(x: Tensor, p: ConvParams, grad_out: Tensor):
    """Exact gradients of conv2d_forward.

    Returns (grad_input, grad_kernel, grad_bias).
    """
    b, c, h, w = x.dims
    oc, ic, kh, kw = p.kernel.dims
    oh = _conv_out_extent(h, kh, p.stride, p.padding)
    ow = _conv_out_extent(w, kw, p.stride, p.padding)
    if grad_out.dims != (b, oc, oh, ow):
        raise ShapeMismatch(
            f"grad_out dims {grad_out.dims} != forward output {(b, oc, oh, ow)}")
    go = np.ascontiguousarray(grad_out.data)
    xp = np.ascontiguousarray(_pad_spatial(x.data, p.padding))
    gxp = kernels.conv2d_grad_input(p.kernel.data, go, p.stride,
                                    h + 2 * p.padding, w + 2 * p.padding)
    if p.padding:
        gx = gxp[:, :, p.padding:p.padding + h, p.padding:p.padding + w]
    else:
        gx = gxp
    gk = kernels.conv2d_grad_kernel(xp, go, p.stride, kh, kw)
    gb = go.sum(axis=(0, 2, 3))
    return Tensor(np.ascontiguousarray(gx)), Tensor(gk), gb


def relu(x: Tensor) -> Tensor:
    return Tensor(np.maximum(x.data, 0))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    if grad_out.dims != x.dims:
        raise ShapeMismatch(f"grad dims {grad_out.dims} != input dims {x.dims}")
    # a tie at exactly 0 passes zero gradient
    return Tensor(np.where(x.data > 0, grad_out.data, 0))


def maxpool2d(x: Tensor):
    """2x2 stride-2 max pool; odd trailing rows/columns are dropped.

    Returns (output, argmax) where argmax holds flat row-major indices
    into each input channel plane (first index wins on exact ties).
    """
    b, c, h, w = x.dims
    if h < 2 or w < 2:
        raise ShapeMismatch(f"pool window 2 exceeds input extents {h}x{w}")
    out, arg = kernels.maxpool2x2_forward(np.ascontiguousarray(x.data))
    return Tensor(out), arg


def maxpool2d_backward(arg: np.ndarray, input_dims, grad_out: Tensor) -> Tensor:
    b, c, h, w = input_dims
    if grad_out.dims != arg.shape:
        raise ShapeMismatch(
            f"grad_out dims {grad_out.dims} != pooled dims {arg.shape}")
    return Tensor(kernels.maxpool2x2_backward(
        arg, np.ascontiguousarray(grad_out.data), h, w))


def transposed_conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Adjoint of conv2d_forward; kernel laid out (CIN, COUT, KH, KW).

    Output spatial extent is (in - 1) * stride + k.
    """
    b, c, h, w = x.dims
    cin, cout, kh, kw = p.kernel.dims
    if c != cin:
        raise ShapeMismatch(f"input has {c} channels, kernel expects {cin}")
    if p.bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {p.bias.shape} != ({cout},)")
    return Tensor(kernels.deconv2d_forward(
        np.ascontiguousarray(x.data), p.kernel.data, p.bias, p.stride))


def transposed_conv2d_backward(x: Tensor, p: ConvParams, grad_out: Tensor):
    b, c, h, w = x.dims
    cin, cout, kh, kw = p.kernel.dims
    oh = (h - 1) * p.stride + kh
    ow = (w - 1) * p.stride + kw
    if grad_out.dims != (b, cout, oh, ow):
        raise ShapeMismatch(
            f"grad_out dims {grad_out.dims} != forward output {(b, cout, oh, ow)}")
    go = np.ascontiguousarray(grad_out.data)
    gx = kernels.deconv2d_grad_input(p.kernel.data, go, p.stride)
    gk = kernels.deconv2d_grad_kernel(
        np.ascontiguousarray(x.data), go, p.stride, kh, kw)
    gb = go.sum(axis=(0, 2, 3))
    return Tensor(gx), Tensor(gk), gb


def bilinear_init(kernel_size: int, stride: int, channels: int) -> Tensor:
    """Channel-diagonal separable bilinear upsampling kernel.

    1-D weights w(i) = 1 - |i - c| / f with f = kernel_size / 2 and
    c = f - 0.5; cross-channel entries are zero.
    """
    if kernel_size % 2 != 0:
        raise UnsupportedGeometry(
            f"bilinear kernel size must be even, got {kernel_size}")
    if stride != kernel_size // 2:
        raise UnsupportedGeometry(
            f"stride must be kernel_size/2, got {stride} for size {kernel_size}")
    f = kernel_size / 2.0
    ctr = f - 0.5
    w1 = 1.0 - np.abs(np.arange(kernel_size) - ctr) / f
    plane = np.outer(w1, w1)
    k = np.zeros((channels, channels, kernel_size, kernel_size))
    for ch in range(channels):
        k[ch, ch] = plane
    return Tensor(k)


def crop_center(x: Tensor, target_h: int, target_w: int,
                offset_h: int, offset_w: int) -> Tensor:
    b, c, h, w = x.dims
    if (offset_h < 0 or offset_w < 0
            or offset_h + target_h > h or offset_w + target_w > w):
        raise ShapeMismatch(
            f"crop {target_h}x{target_w} at ({offset_h},{offset_w}) "
            f"does not fit inside {h}x{w}")
    return Tensor(x.data[:, :, offset_h:offset_h + target_h,
                         offset_w:offset_w + target_w].copy())


def crop_center_backward(grad_out: Tensor, input_dims,
                         offset_h: int, offset_w: int) -> Tensor:
    b, c, h, w = input_dims
    gb, gc, th, tw = grad_out.dims
    gx = np.zeros((b, c, h, w), dtype=grad_out.data.dtype)
    gx[:, :, offset_h:offset_h + th, offset_w:offset_w + tw] = grad_out.data
    return Tensor(gx)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    if a.dims != b.dims:
        raise ShapeMismatch(f"add dims differ: {a.dims} vs {b.dims}")
    return Tensor(a.data + b.data)


def softmax_channels(x: Tensor) -> Tensor:
    """Per-pixel softmax across the channel axis, max-shifted for stability."""
    if x.dims[1] < 2:
        raise ShapeMismatch(f"softmax needs >= 2 channels, got {x.dims[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return Tensor(e / e.sum(axis=1, keepdims=True))


def softmax_backward(probs: Tensor, grad_probs: Tensor) -> Tensor:
    """Pull a gradient w.r.t. softmax outputs back to the input scores."""
    if probs.dims != grad_probs.dims:
        raise ShapeMismatch(
            f"dims differ: {probs.dims} vs {grad_probs.dims}")
    p = probs.data
    g = grad_probs.data
    dot = (p * g).sum(axis=1, keepdims=True)
    return Tensor(p * (g - dot))
