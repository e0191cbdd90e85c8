"""Rank-4 layer primitives with hand-written backward passes.

Every activation is a float64 ``ndarray`` of shape ``(n, c, h, w)``.
Convolution is cross-correlation (no kernel flip) computed as one GEMM over
shifted copies of the input; the naive loop versions in the test suite are
the reference.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DimensionError, TVSegError

DTYPE = np.float64


@dataclass
class ConvKernel:
    """Weights ``(out_channels, in_channels, kh, kw)`` plus one bias per output channel."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        self.bias = np.asarray(self.bias, dtype=DTYPE)
        if self.weights.ndim != 4:
            raise DimensionError(f"kernel weights must be rank 4, got shape {self.weights.shape}")
        if self.weights.shape[2] < 1 or self.weights.shape[3] < 1:
            raise DimensionError(f"kernel spatial size must be >= 1, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    @classmethod
    def zeros_like(cls, other: "ConvKernel") -> "ConvKernel":
        return cls(np.zeros_like(other.weights), np.zeros_like(other.bias))

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weights.copy(), self.bias.copy())


def as_tensor4(x, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 4:
        raise DimensionError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")
    return x


def _conv_out_hw(x: np.ndarray, kernel: ConvKernel, padding: int) -> tuple[int, int]:
    if padding < 0:
        raise DimensionError(f"padding must be non-negative, got {padding}")
    if kernel.in_channels != x.shape[1]:
        raise DimensionError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{kernel.weights.shape} expects {kernel.in_channels}"
        )
    kh, kw = kernel.weights.shape[2:]
    ho = x.shape[2] - kh + 1 + 2 * padding
    wo = x.shape[3] - kw + 1 + 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"input shape {x.shape} too small for kernel shape {kernel.weights.shape} "
            f"with padding {padding}"
        )
    return ho, wo


def _shifted_cols(x: np.ndarray, kh: int, kw: int, padding: int):
    """im2col over flattened padded planes.

    With padded width ``wp``, output pixel ``(i, j)`` sits at flat offset
    ``i * wp + j`` and its tap ``(a, b)`` at that offset plus ``a * wp + b``,
    so every tap is one contiguous slice. Columns ``j >= wo`` are junk and
    are dropped by the caller. Returns ``cols`` of shape
    ``(c * kh * kw, n * ho * wp)`` plus ``(ho, wo, wp)``.
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    ho, wo = hp - kh + 1, wp - kw + 1
    flat = np.zeros((n, c, hp * wp + kw - 1), dtype=DTYPE)
    flat[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, padding:padding + h, padding:padding + w] = x
    m = ho * wp
    cols = np.empty((c, kh, kw, n, m), dtype=DTYPE)
    for a in range(kh):
        for b in range(kw):
            off = a * wp + b
            cols[:, a, b] = flat[:, :, off:off + m].swapaxes(0, 1)
    return cols.reshape(c * kh * kw, n * m), (ho, wo, wp)


# keep each im2col block around L2 size; larger blocks are memory-bound
_COLS_BLOCK_BYTES = 1 << 20


def _chunks(x: np.ndarray, kernel: ConvKernel, padding: int):
    n, c, h, w = x.shape
    kh, kw = kernel.weights.shape[2:]
    per_image = 8 * c * kh * kw * (h + 2 * padding) * (w + 2 * padding)
    step = max(1, _COLS_BLOCK_BYTES // per_image)
    return [slice(s, min(s + step, n)) for s in range(0, n, step)]


def conv2d(x, kernel: ConvKernel, padding: int = 0) -> np.ndarray:
    x = as_tensor4(x)
    ho, wo = _conv_out_hw(x, kernel, padding)
    n = x.shape[0]
    o = kernel.out_channels
    wmat = kernel.weights.reshape(o, -1)
    out = np.empty((n, o, ho, wo), dtype=DTYPE)
    for sl in _chunks(x, kernel, padding):
        cols, (_, _, wp) = _shifted_cols(x[sl], *kernel.weights.shape[2:], padding)
        y = (wmat @ cols).reshape(o, -1, ho, wp)[:, :, :, :wo]
        out[sl] = y.transpose(1, 0, 2, 3)
    out += kernel.bias[None, :, None, None]
    return out


def conv2d_backward(x, kernel: ConvKernel, grad_out, padding: int = 0,
                    input_grad: bool = True) -> tuple[np.ndarray | None, ConvKernel]:
    """Gradients of ``conv2d`` w.r.t. its input and kernel, contracted with ``grad_out``.

    The input gradient is the full correlation of ``grad_out`` with the
    spatially flipped, channel-transposed kernel, cropped by ``padding``.
    Pass ``input_grad=False`` to skip it (first layer of a network).
    """
    x = as_tensor4(x)
    grad_out = as_tensor4(grad_out, "grad_out")
    ho, wo = _conv_out_hw(x, kernel, padding)
    n, c = x.shape[:2]
    o = kernel.out_channels
    if grad_out.shape != (n, o, ho, wo):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match conv output shape {(n, o, ho, wo)}"
        )
    kh, kw = kernel.weights.shape[2:]
    g_w = np.zeros((o, c * kh * kw), dtype=DTYPE)
    for sl in _chunks(x, kernel, padding):  # fixed order, so the sum is reproducible
        cols, (_, _, wp) = _shifted_cols(x[sl], kh, kw, padding)
        gy = np.zeros((o, sl.stop - sl.start, ho, wp), dtype=DTYPE)
        gy[:, :, :, :wo] = grad_out[sl].transpose(1, 0, 2, 3)
        g_w += gy.reshape(o, -1) @ cols.T
    g_w = g_w.reshape(kernel.weights.shape)
    g_b = grad_out.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, ConvKernel(g_w, g_b)

    flipped = ConvKernel(kernel.weights[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), np.zeros(c))
    gxp = conv2d(grad_out, flipped, padding=max(kh, kw) - 1)
    # gxp covers the padded input (plus slack when kh != kw); crop to the real pixels
    top, left = max(kh, kw) - kh + padding, max(kh, kw) - kw + padding
    gx = gxp[:, :, top:top + x.shape[2], left:left + x.shape[3]]
    return np.ascontiguousarray(gx), ConvKernel(g_w, g_b)


def maxpool2(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling.

    Returns the pooled tensor and, per output cell, the flat index
    ``row * w + col`` of the winning input pixel within its channel plane.
    Ties go to the first candidate in row-major order.
    """
    x = as_tensor4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got shape {x.shape}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    local = blocks.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(blocks, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, :] + local % 2
    return out, rows * w + cols


def maxpool2_backward(indices, grad_out, input_shape) -> np.ndarray:
    grad_out = as_tensor4(grad_out, "grad_out")
    indices = np.asarray(indices)
    n, c, h, w = input_shape
    if indices.shape != grad_out.shape or grad_out.shape != (n, c, h // 2, w // 2):
        raise DimensionError(
            f"indices {indices.shape} / grad_out {grad_out.shape} inconsistent with input {tuple(input_shape)}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= h * w):
        raise TVSegError("max-pool indices out of range for the recorded input shape")
    grad = np.zeros((n, c, h * w), dtype=DTYPE)
    # each input pixel belongs to exactly one window, so plain assignment is safe
    np.put_along_axis(grad, indices.reshape(n, c, -1), grad_out.reshape(n, c, -1), axis=-1)
    return grad.reshape(n, c, h, w)


def _check_upconv(x: np.ndarray, kernel: ConvKernel) -> None:
    if kernel.weights.shape[2:] != (2, 2):
        raise DimensionError(f"upconv2 needs a 2x2 kernel, got shape {kernel.weights.shape}")
    if kernel.in_channels != x.shape[1]:
        raise DimensionError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{kernel.weights.shape} expects {kernel.in_channels}"
        )


def upconv2(x, kernel: ConvKernel) -> np.ndarray:
    """Stride-2 transposed convolution with a 2x2 kernel; doubles h and w.

    ``out[n, o, 2i + a, 2j + b] = sum_c x[n, c, i, j] * W[o, c, a, b] + bias[o]``
    """
    x = as_tensor4(x)
    _check_upconv(x, kernel)
    n, _, h, w = x.shape
    o = kernel.out_channels
    y = np.einsum("nchw,ocab->nohawb", x, kernel.weights, optimize=True)
    y = y.reshape(n, o, 2 * h, 2 * w)
    return y + kernel.bias[None, :, None, None]


def upconv2_backward(x, kernel: ConvKernel, grad_out) -> tuple[np.ndarray, ConvKernel]:
    x = as_tensor4(x)
    grad_out = as_tensor4(grad_out, "grad_out")
    _check_upconv(x, kernel)
    n, _, h, w = x.shape
    o = kernel.out_channels
    if grad_out.shape != (n, o, 2 * h, 2 * w):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match upconv output shape {(n, o, 2 * h, 2 * w)}"
        )
    g = grad_out.reshape(n, o, h, 2, w, 2)
    gx = np.einsum("nohawb,ocab->nchw", g, kernel.weights, optimize=True)
    gw = np.einsum("nohawb,nchw->ocab", g, x, optimize=True)
    return np.ascontiguousarray(gx), ConvKernel(gw, grad_out.sum(axis=(0, 2, 3)))


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor4(x), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    # subgradient at 0 is taken as 0
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def concat_channels(a, b) -> np.ndarray:
    a = as_tensor4(a, "a")
    b = as_tensor4(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"cannot concatenate shapes {a.shape} and {b.shape} along channels")
    return np.concatenate([a, b], axis=1)


def split_channels(x, c_first: int) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of ``concat_channels``; also its backward pass."""
    x = as_tensor4(x)
    if not 0 <= c_first <= x.shape[1]:
        raise DimensionError(f"split point {c_first} outside channel range of shape {x.shape}")
    return x[:, :c_first], x[:, c_first:]


def log_softmax_channels(x) -> np.ndarray:
    x = as_tensor4(x)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_channels(x) -> np.ndarray:
    x = as_tensor4(x)
    if x.shape[1] < 2:
        raise DimensionError(f"softmax over channels needs c >= 2, got shape {x.shape}")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return grad
