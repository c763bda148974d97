"""Dense NCHW tensor primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channels, height, width). Every op is a pure function; the backward
functions take the forward inputs explicitly instead of relying on a tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 N,C,H,W array, got {getattr(x, 'shape', type(x))}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


@dataclass
class ConvKernel:
    """Weights of shape (out, in, kh, kw) plus one bias per output channel."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weights.ndim != 4:
            raise ShapeError(f"kernel weights must be rank 4, got {self.weights.shape}")
        out_c, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel dims must be odd for same padding, got {kh}x{kw}")
        if self.bias.shape != (out_c,):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {out_c} output channels")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.weights.shape

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, out_c: int, in_c: int, kh: int, kw: int, dtype=np.float32) -> "ConvKernel":
        return cls(np.zeros((out_c, in_c, kh, kw), dtype=dtype), np.zeros(out_c, dtype=dtype))

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy())


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (N*H*W, C*kh*kw) patch matrix of the zero-padded input
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # N,C,H,W,kh,kw
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _correlate(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    n, _, h, w = x.shape
    out_c, _, kh, kw = weights.shape
    if kh == 1 and kw == 1:
        return np.einsum("nchw,oc->nohw", x, weights[:, :, 0, 0], optimize=True)
    cols = _im2col(x, kh, kw)
    out = cols @ weights.reshape(out_c, -1).T
    return out.reshape(n, h, w, out_c).transpose(0, 3, 1, 2)


def conv2d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Stride-1 convolution (cross-correlation) with zero "same" padding."""
    check_tensor(x, "input")
    if x.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.in_channels}"
        )
    out = _correlate(x, kernel.weights)
    out += kernel.bias[None, :, None, None]
    return np.ascontiguousarray(out)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, kernel: ConvKernel):
    """Gradients of ``sum(grad_out * conv2d_forward(x, kernel))``.

    Returns ``(grad_input, grad_weights, grad_bias)``.
    """
    check_tensor(x, "input")
    expected = (x.shape[0], kernel.out_channels, x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output shape {expected}")
    if x.shape[1] != kernel.in_channels:
        raise ShapeError(
            f"input has {x.shape[1]} channels but kernel expects {kernel.in_channels}"
        )
    out_c, in_c, kh, kw = kernel.shape
    n, _, h, w = x.shape

    grad_bias = grad_out.sum(axis=(0, 2, 3))
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * w, out_c)
    if kh == 1 and kw == 1:
        grad_weights = (g.T @ x.transpose(0, 2, 3, 1).reshape(n * h * w, in_c)).reshape(kernel.shape)
    else:
        grad_weights = (g.T @ _im2col(x, kh, kw)).reshape(kernel.shape)
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    flipped = kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_input = np.ascontiguousarray(_correlate(grad_out, np.ascontiguousarray(flipped)))
    return grad_input, grad_weights, grad_bias


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape}: N,H,W differ")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, a_channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward of :func:`concat_channels`: route the gradient back to each input."""
    if not 0 < a_channels < grad.shape[1]:
        raise ShapeError(f"split point {a_channels} outside 1..{grad.shape[1] - 1}")
    return grad[:, :a_channels], grad[:, a_channels:]
