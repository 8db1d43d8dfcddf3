"""Finite-difference verification of every layer's backward pass (float64)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (BatchNorm2d, Conv2d, ConvComparison, LeakyReLU, Linear, ReLU, Sigmoid,
                     conv_comparison_loss, softmax_cross_entropy)
from .tensor import Prng, finite_diff_grad, max_relative_error

TOLERANCE = 1e-5
COMPARISON_ALPHAS = (0.0, 0.3, 0.8, 1.0)


@dataclass
class CheckResult:
    layer: str
    tensor: str
    error: float

    @property
    def passed(self) -> bool:
        return self.error < TOLERANCE


def _rand(prng, *shape, away_from_zero=0.0):
    x = prng.normal(int(np.prod(shape))).reshape(shape)
    if away_from_zero:
        # keep piecewise-linear units clear of their kink
        x = np.where(np.abs(x) < away_from_zero, np.sign(x + 1e-12) * away_from_zero, x)
    return x


def _check_layer(name, layer, x, prng, eps=1e-4):
    """Compare analytic gradients of ``sum(R * layer(x))`` with central differences."""
    layer.astype(np.float64)
    out = layer.forward(x)
    R = _rand(prng, *out.shape)

    def objective(o):
        return float(np.sum(o * R))

    layer.zero_grad()
    gx = layer.backward(R.copy(), True)

    def f_x(v):
        return objective(layer.forward(v))

    results = [CheckResult(name, "input", max_relative_error(gx, finite_diff_grad(f_x, x.copy(), eps)))]
    analytic = {k: g.copy() for k, g in layer.grads.items()}
    for key, p in layer.params.items():
        def f_p(v, key=key):
            saved = layer.params[key]
            layer.params[key] = v
            try:
                return objective(layer.forward(x))
            finally:
                layer.params[key] = saved
        numeric = finite_diff_grad(f_p, p.copy(), eps)
        results.append(CheckResult(name, key, max_relative_error(analytic[key], numeric)))
    return results


def _comparison_results(alpha, prng):
    layer = ConvComparison(3, 4, 3, 1, prng, np.float64, alpha=alpha)
    x = _rand(prng, 2, 3, 6, 6)
    c_g = _rand(prng, 2, 4, 6, 6)
    layer.record(c_g)
    out = layer.forward(x)
    R = _rand(prng, *out.shape)
    # the norm-matching factor is a constant of the backward rule; freeze it
    # at the evaluation point and differentiate (1-a)*<R, out> + a*s*E_c
    nu = np.linalg.norm(R)
    nc = np.linalg.norm(out - c_g)
    s = nu / nc if nu > 0 and nc > 0 else 1.0

    def objective(o):
        return (1 - alpha) * float(np.sum(o * R)) + alpha * s * conv_comparison_loss(o, c_g)

    layer.zero_grad()
    gx = layer.backward(R.copy(), True)
    name = f"conv_comparison(alpha={alpha})"
    results = [CheckResult(name, "input", max_relative_error(
        gx, finite_diff_grad(lambda v: objective(layer.forward(v)), x.copy())))]
    for key, p in layer.params.items():
        def f_p(v, key=key):
            saved = layer.params[key]
            layer.params[key] = v
            try:
                return objective(layer.forward(x))
            finally:
                layer.params[key] = saved
        results.append(CheckResult(name, key, max_relative_error(
            layer.grads[key], finite_diff_grad(f_p, p.copy()))))
    return results


def _softmax_results(prng):
    logits = _rand(prng, 2, 5)
    labels = np.array([2, 5])
    _, grad = softmax_cross_entropy(logits, labels)
    numeric = finite_diff_grad(lambda z: softmax_cross_entropy(z, labels)[0], logits.copy())
    return [CheckResult("softmax_cross_entropy", "logits", max_relative_error(grad, numeric))]


def run_gradcheck(seed: int = 0, alphas=COMPARISON_ALPHAS) -> list[CheckResult]:
    prng = Prng(seed)
    results = []
    results += _check_layer("conv", Conv2d(3, 4, 3, 1, prng), _rand(prng, 2, 3, 6, 6), prng)
    results += _check_layer("conv_stride2", Conv2d(3, 4, 3, 2, prng), _rand(prng, 2, 3, 6, 6), prng)
    bn = BatchNorm2d(3)
    bn.params["gamma"] = 1 + 0.5 * prng.normal(3)
    bn.params["beta"] = prng.normal(3)
    results += _check_layer("batchnorm", bn, _rand(prng, 2, 3, 6, 6), prng)
    results += _check_layer("relu", ReLU(), _rand(prng, 2, 3, 6, 6, away_from_zero=0.01), prng)
    results += _check_layer("leaky_relu", LeakyReLU(0.2),
                            _rand(prng, 2, 3, 6, 6, away_from_zero=0.01), prng)
    results += _check_layer("sigmoid", Sigmoid(), _rand(prng, 2, 3, 6, 6), prng)
    results += _check_layer("fully_connected", Linear(12, 5, prng), _rand(prng, 2, 3, 2, 2), prng)
    results += _softmax_results(prng)
    for a in alphas:
        results += _comparison_results(a, prng)
    return results
