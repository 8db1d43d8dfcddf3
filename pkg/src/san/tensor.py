"""Dense NCHW kernels, a reproducible random source, and a finite-difference oracle.

Tensors are plain ``numpy.ndarray`` objects laid out row-major as
``(batch, channels, rows, cols)``.  Kernels keep the dtype of their inputs, so
the same code runs in float32 for training and float64 for gradient checks.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

DEFAULT_DTYPE = np.float32

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{what} contains NaN or Inf")
    return x


def _mix64(z):
    # splitmix64 finalizer; works on Python ints and on uint64 arrays
    if isinstance(z, np.ndarray):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Prng:
    """splitmix64 stream with Box-Muller normals.

    Every draw advances the 64-bit state by the golden-ratio increment, so
    bulk array draws and scalar draws consume the same sequence.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        return _mix64(self.state)

    def u64(self, n: int) -> np.ndarray:
        n = int(n)
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            states = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
            out = _mix64(states)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return out

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 draws in [0, 1) built from the top 53 bits."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Integer in [0, n) via the multiply-shift map."""
        if n <= 0:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1 = 1.0 - u[0::2]  # (0, 1]
        u2 = u[1::2]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)

    def shuffle(self, items: list) -> list:
        """Seeded Fisher-Yates, in place; returns ``items``."""
        for i in range(len(items) - 1, 0, -1):
            j = self.below(i + 1)
            items[i], items[j] = items[j], items[i]
        return items

    def permutation(self, n: int) -> list[int]:
        return self.shuffle(list(range(n)))


# -- convolution ------------------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    """``floor((size + 2*pad - k) / stride) + 1``; trailing rows a stride skips are dropped."""
    span = size + 2 * pad - k
    if span < 0:
        raise ShapeError(f"kernel {k} does not fit input {size} with padding {pad}")
    return span // stride + 1


def _check_conv_args(x, w, b, stride, pad):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weights")
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ShapeError(f"input has {x.shape[1]} channels, weights expect {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("kernel sizes must be odd")
    if b is not None and b.shape != (co,):
        raise ShapeError(f"bias shape {b.shape} != ({co},)")
    if stride < 1 or pad < 0:
        raise ValueError("stride must be positive and pad non-negative")
    return (conv_output_size(x.shape[2], kh, stride, pad),
            conv_output_size(x.shape[3], kw, stride, pad))


def _im2col(x, kh, kw, stride, pad, oh, ow):
    """Patch matrix of shape (n*oh*ow, kh*kw*c), channel index fastest.

    Built from a channels-last copy so every patch row is a run of contiguous
    channel vectors; this is markedly faster than windowing NCHW directly.
    """
    n, c, h, w = x.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[:, pad:pad + h, pad:pad + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :]
    return cols.reshape(n * oh * ow, kh * kw * c)


def _weight_matrix(w):
    co, ci, kh, kw = w.shape
    return w.transpose(2, 3, 1, 0).reshape(kh * kw * ci, co)


def _padded_rows(x, ph, pw, extra):
    """Channels-last, zero-padded copy of ``x`` flattened to (rows, c).

    ``extra`` zero rows are appended so every shifted window slice stays in
    bounds.
    """
    n, c, h, w = x.shape
    H, W = h + 2 * ph, w + 2 * pw
    X = np.zeros((n * H * W + extra, c), dtype=x.dtype)
    X[:n * H * W].reshape(n, H, W, c)[:, ph:ph + h, pw:pw + w, :] = x.transpose(0, 2, 3, 1)
    return X


def _conv_s1(x, w, ph, pw):
    # Stride-1 convolution as a sum of kh*kw shifted matmuls over the padded
    # grid; rows falling in the padding columns are computed and discarded.
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    H, W = h + 2 * ph, wd + 2 * pw
    rows = n * H * W
    X = _padded_rows(x, ph, pw, (kh - 1) * W + kw - 1)
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
    out = X[:rows] @ wt[0, 0]
    for i in range(kh):
        for j in range(kw):
            if i or j:
                off = i * W + j
                out += X[off:off + rows] @ wt[i, j]
    return out.reshape(n, H, W, co)[:, :H - kh + 1, :W - kw + 1, :]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation of ``x`` with ``w`` plus a per-channel bias."""
    oh, ow = _check_conv_args(x, w, b, stride, pad)
    n, co = x.shape[0], w.shape[0]
    if stride == 1:
        out = _conv_s1(x, w, pad, pad)
    else:
        out = (_im2col(x, w.shape[2], w.shape[3], stride, pad, oh, ow)
               @ _weight_matrix(w)).reshape(n, oh, ow, co)
    if b is not None:
        out = out + b
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    return check_finite(out, "conv2d output")


def _conv_s1_grad_w(x, grad_out, kh, kw, pad):
    n, c, h, wd = x.shape
    co = grad_out.shape[1]
    H, W = h + 2 * pad, wd + 2 * pad
    rows = n * H * W
    X = _padded_rows(x, pad, pad, (kh - 1) * W + kw - 1)
    G = np.zeros((n, H, W, co), dtype=grad_out.dtype)
    G[:, :H - kh + 1, :W - kw + 1, :] = grad_out.transpose(0, 2, 3, 1)
    G = G.reshape(rows, co)
    gw = np.empty((co, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            off = i * W + j
            gw[:, :, i, j] = G.T @ X[off:off + rows]
    return gw


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray,
                    stride: int = 1, pad: int = 0,
                    need_input_grad: bool = True):
    """Return ``(grad_in, grad_w, grad_b)`` for :func:`conv2d_forward`.

    ``grad_in`` is ``None`` when ``need_input_grad`` is false.
    """
    oh, ow = _check_conv_args(x, w, None, stride, pad)
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    if grad_out.shape != (n, co, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, co, oh, ow)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if stride == 1:
        grad_w = _conv_s1_grad_w(x, grad_out, kh, kw, pad)
    else:
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
        cols = _im2col(x, kh, kw, stride, pad, oh, ow)
        grad_w = (cols.T @ g2).reshape(kh, kw, ci, co).transpose(3, 2, 0, 1)
        grad_w = np.ascontiguousarray(grad_w)
        del cols
    grad_in = None
    if need_input_grad:
        if stride == 1:
            # full correlation of grad_out with the flipped, transposed kernel
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full = _conv_s1(grad_out, wf, kh - 1, kw - 1)
            grad_in = np.ascontiguousarray(
                full[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))
        else:
            g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, co)
            dcols = (g2 @ _weight_matrix(w).T).reshape(n, oh, ow, kh, kw, ci)
            gp = np.zeros((n, h + 2 * pad, wd + 2 * pad, ci), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += dcols[:, :, :, i, j, :]
            grad_in = np.ascontiguousarray(
                gp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2))
        check_finite(grad_in, "conv2d grad_in")
    return grad_in, check_finite(grad_w, "conv2d grad_w"), grad_b


# -- elementwise ------------------------------------------------------------


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _same_shape(a, b)
    return check_finite(a + b, "add")


def mul_scalar(a: np.ndarray, s: float) -> np.ndarray:
    return check_finite(a * a.dtype.type(s), "mul_scalar")


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    _same_shape(x, grad_out)
    return grad_out * (x > 0)


def leaky_relu(x, slope: float = 0.2):
    return np.where(x >= 0, x, x * x.dtype.type(slope))


def leaky_relu_backward(x, grad_out, slope: float = 0.2):
    _same_shape(x, grad_out)
    return grad_out * np.where(x >= 0, 1, slope).astype(x.dtype)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def sigmoid_backward(y, grad_out):
    """Backward in terms of the forward *output* ``y``."""
    _same_shape(y, grad_out)
    return grad_out * y * (1 - y)


# -- dense ------------------------------------------------------------------


def matmul_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """Affine map ``x @ w + b`` with ``x`` (n, d_in) and ``w`` (d_in, d_out)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    out = x @ w
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
        out = out + b
    return check_finite(out, "matmul output")


def matmul_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    if grad_out.shape != (x.shape[0], w.shape[1]):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(x.shape[0], w.shape[1])}")
    return grad_out @ w.T, x.T @ grad_out, grad_out.sum(axis=0)


# -- finite differences -----------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 only).

    ``x`` is perturbed in place and restored after each coordinate.
    """
    if x.dtype != np.float64:
        raise TypeError("finite differences require float64 tensors")
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"function value not finite at coordinate {i}")
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error ``max|a-b| / max(max|a|, max|b|)``.

    Normalising by the tensor's scale rather than per element keeps
    near-zero components (ReLU dead zones, cancelling sums) from dominating.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    if not a.size:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b))) / scale
