"""Layers with explicit forward/backward, losses, He init and plain SGD.

Each layer caches what its backward needs from the most recent forward call
and accumulates parameter gradients into ``self.grads``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Prng, ShapeError, check_finite


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a network description."""

    kind: str  # conv | conv_stride2 | conv_comparison | batchnorm | relu | leaky_relu | sigmoid | fully_connected
    channels_in: int = 0
    channels_out: int = 0
    kernel: int = 3
    slope: float = 0.2

    KINDS = ("conv", "conv_stride2", "conv_comparison", "batchnorm", "relu",
             "leaky_relu", "sigmoid", "fully_connected")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def stride(self) -> int:
        return 2 if self.kind == "conv_stride2" else 1


def he_init(shape, fan_in: int, prng: Prng, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Zero-mean normal draws with variance ``2 / fan_in``."""
    if fan_in <= 0:
        raise ValueError("fan_in must be positive")
    n = int(np.prod(shape))
    return (prng.normal(n) * math.sqrt(2.0 / fan_in)).reshape(shape).astype(dtype)


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]
    training = True

    def __init__(self):
        self.params = {}
        self.grads = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, need_input_grad: bool = True):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)

    def astype(self, dtype):
        for k in list(self.params):
            self.params[k] = self.params[k].astype(dtype)
        self.grads = {}
        return self

    def state(self) -> dict[str, np.ndarray]:
        """Persisted tensors: parameters plus any running statistics."""
        return self.params


class Conv2d(Layer):
    def __init__(self, c_in, c_out, kernel=3, stride=1, prng: Prng | None = None,
                 dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.stride, self.pad = stride, kernel // 2
        shape = (c_out, c_in, kernel, kernel)
        fan_in = c_in * kernel * kernel
        w = he_init(shape, fan_in, prng, dtype) if prng is not None else np.zeros(shape, dtype)
        self.params = {"w": w, "b": np.zeros(c_out, dtype)}
        self._x = None

    def forward(self, x):
        self._x = x
        return T.conv2d_forward(x, self.params["w"], self.params["b"], self.stride, self.pad)

    def _param_backward(self, grad_out, need_input_grad):
        gi, gw, gb = T.conv2d_backward(self._x, self.params["w"], grad_out,
                                       self.stride, self.pad, need_input_grad)
        self._accumulate("w", gw)
        self._accumulate("b", gb)
        return gi

    def backward(self, grad_out, need_input_grad=True):
        return self._param_backward(grad_out, need_input_grad)


def conv_comparison_loss(c_s: np.ndarray, c_g: np.ndarray) -> float:
    """Half the squared Euclidean distance between the two activations."""
    if c_s.shape != c_g.shape:
        raise ShapeError(f"shape mismatch {c_s.shape} vs {c_g.shape}")
    d = (c_s - c_g).astype(np.float64)
    return 0.5 * float(np.sum(d * d))


class ConvComparison(Conv2d):
    """Convolution whose backward blends the upstream error with a pull of
    its output toward a recorded reference activation.

    A reference is held per batch row.  Rows without one, or a layer with no
    references at all, backpropagate exactly like :class:`Conv2d`.
    """

    def __init__(self, c_in, c_out, kernel=3, stride=1, prng=None,
                 dtype=T.DEFAULT_DTYPE, alpha: float = 0.8):
        super().__init__(c_in, c_out, kernel, stride, prng, dtype)
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.alpha = alpha
        self.active = True
        self.reference: np.ndarray | None = None
        self.ref_rows: np.ndarray | None = None
        self.pairing: np.ndarray | None = None
        self.last_ec = 0.0
        self.last_output_grad: np.ndarray | None = None
        self._out = None

    def record(self, c_g: np.ndarray, rows=None):
        """Store ground-truth activations; ``rows`` selects which batch rows
        of the next forward they pair with (default: all, in order)."""
        c_g = np.array(c_g, dtype=self.params["w"].dtype, copy=True)
        if rows is None:
            rows = np.arange(c_g.shape[0])
        rows = np.asarray(rows, dtype=np.intp)
        if rows.shape[0] != c_g.shape[0]:
            raise ShapeError("one row index is needed per reference")
        self.reference, self.ref_rows = c_g, rows

    def clear(self):
        self.reference = self.ref_rows = None
        self.pairing = None

    def forward(self, x):
        out = super().forward(x)
        self._out = out
        if self.pairing is not None:
            # same-pass pairing: row dst takes row src of this output as reference
            src, dst = self.pairing
            self.record(out[src], dst)
        return out

    def blended_output_grad(self, grad_up: np.ndarray) -> np.ndarray:
        """Gradient at the layer output after mixing in the comparison error."""
        if self.reference is None or not self.active:
            self.last_ec = 0.0
            return grad_up
        out = self._out
        if grad_up.shape != out.shape:
            raise ShapeError(f"upstream gradient {grad_up.shape} != output {out.shape}")
        if self.reference.shape[1:] != out.shape[1:] or self.ref_rows.max() >= out.shape[0]:
            raise ShapeError("reference does not match the layer output")
        rows = self.ref_rows
        c_s = out[rows]
        self.last_ec = conv_comparison_loss(c_s, self.reference)
        g_c = c_s - self.reference
        g_u = grad_up[rows]
        nu = float(np.sqrt(np.sum(np.square(g_u, dtype=np.float64))))
        nc = float(np.sqrt(np.sum(np.square(g_c, dtype=np.float64))))
        if nu > 0 and nc > 0:
            g_c = g_c * (nu / nc)
        a = self.alpha
        blended = grad_up.copy()
        blended[rows] = (1 - a) * g_u + a * g_c
        return blended

    def backward(self, grad_out, need_input_grad=True):
        g = self.blended_output_grad(grad_out)
        self.last_output_grad = g
        return self._param_backward(g, need_input_grad)


class BatchNorm2d(Layer):
    def __init__(self, channels, momentum=0.9, eps=1e-5, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.ones(channels, dtype), "beta": np.zeros(channels, dtype)}
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self._cache = None

    def state(self):
        return {**self.params, "running_mean": self.running_mean,
                "running_var": self.running_var}

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)
        return self

    def forward(self, x):
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        beta = self.params["beta"].reshape(1, -1, 1, 1)
        if self.training:
            if x.shape[0] < 2:
                raise ValueError("batchnorm needs a batch of at least 2 in train mode")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.running_mean = (m * self.running_mean + (1 - m) * mean).astype(x.dtype)
            self.running_var = (m * self.running_var + (1 - m) * var).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv, self.training)
        return check_finite(gamma * xhat + beta, "batchnorm output")

    def backward(self, grad_out, need_input_grad=True):
        xhat, inv, training = self._cache
        self._accumulate("gamma", np.sum(grad_out * xhat, axis=(0, 2, 3)))
        self._accumulate("beta", grad_out.sum(axis=(0, 2, 3)))
        if not need_input_grad:
            return None
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        inv = inv.reshape(1, -1, 1, 1)
        gxhat = grad_out * gamma
        if not training:
            return gxhat * inv
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return inv * (gxhat - mean_g - xhat * mean_gx)


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return T.relu(x)

    def backward(self, grad_out, need_input_grad=True):
        return T.relu_backward(self._x, grad_out)


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        self._x = x
        return T.leaky_relu(x, self.slope)

    def backward(self, grad_out, need_input_grad=True):
        return T.leaky_relu_backward(self._x, grad_out, self.slope)


class Sigmoid(Layer):
    def forward(self, x):
        self._y = T.sigmoid(x)
        return self._y

    def backward(self, grad_out, need_input_grad=True):
        return T.sigmoid_backward(self._y, grad_out)


class Linear(Layer):
    """Fully-connected layer; 4-D inputs are flattened per batch row."""

    def __init__(self, d_in, d_out, prng: Prng | None = None, dtype=T.DEFAULT_DTYPE):
        super().__init__()
        w = he_init((d_in, d_out), d_in, prng, dtype) if prng is not None \
            else np.zeros((d_in, d_out), dtype)
        self.params = {"w": w, "b": np.zeros(d_out, dtype)}

    def forward(self, x):
        self._shape = x.shape
        self._x = x.reshape(x.shape[0], -1)
        return T.matmul_forward(self._x, self.params["w"], self.params["b"])

    def backward(self, grad_out, need_input_grad=True):
        gi, gw, gb = T.matmul_backward(self._x, self.params["w"], grad_out)
        self._accumulate("w", gw)
        self._accumulate("b", gb)
        return gi.reshape(self._shape) if need_input_grad else None


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch and its logit gradient.

    ``labels`` are 1-based class indices: label ``k`` selects column ``k-1``.
    """
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 1 or labels.max() > k:
        raise ValueError(f"labels must lie in [1, {k}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    idx = labels - 1
    loss = -float(logp[np.arange(n), idx].mean())
    grad = np.exp(logp)
    grad[np.arange(n), idx] -= 1
    return loss, grad / n


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient."""
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(np.square(d, dtype=np.float64))), (2.0 / d.size) * d


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], lr: float):
    """In-place ``p -= lr * g``; no momentum, no weight decay."""
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    for p, g in zip(params, grads):
        check_finite(g, "gradient")
        p -= p.dtype.type(lr) * g.astype(p.dtype, copy=False)
