"""Shared test oracles: finite differences, corner enumeration, toy models."""

from __future__ import annotations

import numpy as np

from dardkit import losses
from dardkit.models import DifferentiableClassifier


def fd_gradient(value_fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        flat[i] = (value_fn(xp.reshape(x.shape)) - value_fn(xm.reshape(x.shape))) / (
            2 * h
        )
    return grad


def loss_value(model, x, y, kind: str, **params) -> float:
    """Scalar loss via the forward pass only (no backward code involved)."""
    logits = model.forward(x)
    if kind == "ce":
        return losses.cross_entropy(logits, y)
    if kind == "dice":
        return float(
            losses.dice_loss(losses.softmax(logits), y, params.get("smooth", 1.0)).mean()
        )
    if kind == "dpgd":
        value, _, _ = losses.partitioned_loss_logit_grad(
            logits, y, params["lam"], params.get("base", "dice"), params.get("smooth", 1.0)
        )
        return value
    raise ValueError(kind)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, min_mag: float = 1e-6):
    """Elementwise relative error where the analytic gradient is non-negligible."""
    mask = np.abs(analytic) > min_mag
    if not mask.any():
        return np.zeros(0)
    denom = np.maximum(np.abs(numeric[mask]), 1e-300)
    return np.abs(analytic[mask] - numeric[mask]) / denom


def enumerate_corner_max_ce(w: np.ndarray, b: np.ndarray, x0: np.ndarray, y: int, eps: float):
    """Brute-force maximizer of CE over the corners of the clipped eps-box.

    Returns (best_x, best_ce).  Only practical for small input dimension.
    """
    d = x0.size
    lo = np.clip(x0 - eps, 0.0, 1.0)
    hi = np.clip(x0 + eps, 0.0, 1.0)
    best_x, best_ce = None, -np.inf
    for bits in range(2**d):
        corner = np.where(
            [(bits >> j) & 1 for j in range(d)], hi, lo
        ).astype(np.float64)
        logits = (w @ corner + b)[None, :]
        ce = losses.cross_entropy(logits, np.array([y]))
        if ce > best_ce:
            best_ce, best_x = ce, corner
    return best_x, best_ce


class QuadraticHead(DifferentiableClassifier):
    """Two-class toy model: logits = [-||x - a||^2, 0].

    The cross-entropy as a function of x has a strict global minimum at
    x == a for label 0, where both logit gradients vanish identically.
    """

    architecture_id = "toy-quadratic"

    def __init__(self, anchor: np.ndarray):
        super().__init__((anchor.size,), 2)
        self.anchor = np.asarray(anchor, dtype=np.float32)

    def _param_arrays(self):
        return [self.anchor]

    def _forward(self, x):
        diff = x - self.anchor.astype(np.float64)
        logits = np.stack([-(diff**2).sum(axis=1), np.zeros(x.shape[0])], axis=1)
        return logits, (diff,)

    def backward(self, cache, dlogits):
        (diff,) = cache
        dx = dlogits[:, 0:1] * (-2.0 * diff)
        danchor = -(dlogits[:, 0:1] * (-2.0 * diff)).sum(axis=0)
        return danchor, dx


class ScaledGradientModel(DifferentiableClassifier):
    """Wrapper whose loss is effectively scaled by a constant factor.

    Forward passes match the wrapped model exactly; backward multiplies every
    gradient by the factor.  Sign-based attacks must be invariant to it.
    """

    def __init__(self, inner: DifferentiableClassifier, factor: float):
        super().__init__(inner.input_shape, inner.num_classes)
        self.inner = inner
        self.factor = factor
        self.architecture_id = f"scaled-{inner.architecture_id}"

    def _param_arrays(self):
        return self.inner._param_arrays()

    def _forward(self, x):
        return self.inner._forward(x)

    def backward(self, cache, dlogits):
        grads, dx = self.inner.backward(cache, dlogits)
        return self.factor * grads, self.factor * dx
