"""Dense float64 arithmetic helpers, activations, a small gradient tape and Adam.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  Leading batch
axes are allowed everywhere; the tape broadcasts a 2-D parameter against a
stack of per-channel matrices the same way ``numpy.matmul`` does.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

DTYPE = np.float64
LEAKY_SLOPE = 0.01
POWER_CLAMP = 1e-20


class NumericalError(ArithmeticError):
    """Raised when a public operation would produce NaN or Inf."""


class StaleTapeError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=DTYPE)
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite entries")
    return a


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=DTYPE)


# --- activations -----------------------------------------------------------


def elu(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def scaled_sigmoid(x, p_max: float):
    if p_max <= 0:
        raise ValueError("p_max must be positive")
    return p_max * expit(np.asarray(x, dtype=DTYPE))


def scaled_sigmoid_grad(x, p_max: float):
    s = expit(np.asarray(x, dtype=DTYPE))
    return p_max * s * (1.0 - s)


def leaky_relu(x, slope: float = LEAKY_SLOPE):
    if not 0 < slope < 1:
        raise ValueError("slope must lie in (0, 1)")
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope: float = LEAKY_SLOPE):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x > 0, 1.0, slope)


def clamp_small(x, threshold: float = POWER_CLAMP):
    """Zero out entries strictly below ``threshold`` (powers treated as off)."""
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x < threshold, 0.0, x)


def clamp_small_grad(x, threshold: float = POWER_CLAMP):
    x = np.asarray(x, dtype=DTYPE)
    return np.where(x < threshold, 0.0, 1.0)


# name -> (value, derivative); keyword arguments are forwarded to both
ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "identity": (lambda x: np.asarray(x, dtype=DTYPE), lambda x: np.ones_like(x, dtype=DTYPE)),
    "elu": (elu, elu_grad),
    "scaled_sigmoid": (scaled_sigmoid, scaled_sigmoid_grad),
    "leaky_relu": (leaky_relu, leaky_relu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "clamp": (clamp_small, clamp_small_grad),
}


# --- gradient tape ---------------------------------------------------------


@dataclass(frozen=True)
class Var:
    index: int
    value: np.ndarray

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes that broadcasting added to reach its shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class GradTape:
    """Records a fixed set of primitives and replays them in reverse.

    Supported primitives: matmul, add (bias broadcast), elementwise map,
    scale, mean and masked mean.  A tape can be replayed once; a second
    ``backward`` call raises :class:`StaleTapeError`.
    """

    def __init__(self):
        self._ops: list[tuple] = []
        self._values: list[np.ndarray] = []
        self._params: dict[str, int] = {}
        self.used = False

    def _push(self, value, op) -> Var:
        value = np.asarray(value, dtype=DTYPE)
        self._values.append(value)
        self._ops.append(op)
        return Var(len(self._values) - 1, value)

    def constant(self, value) -> Var:
        return self._push(value, ("const",))

    def parameter(self, name: str, value) -> Var:
        if name in self._params:
            raise ValueError(f"parameter {name!r} recorded twice")
        var = self._push(value, ("param", name))
        self._params[name] = var.index
        return var

    def matmul(self, a: Var, b: Var) -> Var:
        return self._push(np.matmul(a.value, b.value), ("matmul", a.index, b.index))

    def add(self, a: Var, b: Var) -> Var:
        return self._push(a.value + b.value, ("add", a.index, b.index))

    def map(self, a: Var, name: str, **kw) -> Var:
        fn, _ = ACTIVATIONS[name]
        return self._push(fn(a.value, **kw), ("map", a.index, name, kw))

    def scale(self, a: Var, c: float) -> Var:
        return self._push(c * a.value, ("scale", a.index, float(c)))

    def mean(self, a: Var, axis: int) -> Var:
        return self._push(a.value.mean(axis=axis), ("mean", a.index, axis))

    def masked_mean(self, a: Var, mask, axis: int) -> Var:
        """Mean over ``axis`` restricted to ``mask``; empty slices give 0."""
        mask = np.asarray(mask, dtype=DTYPE)
        count = mask.sum(axis=axis)
        safe = np.where(count > 0, count, 1.0)
        value = (a.value * mask).sum(axis=axis) / safe
        return self._push(value, ("masked_mean", a.index, axis, mask, safe))

    def backward(self, out: Var, upstream) -> dict[str, np.ndarray]:
        if self.used:
            raise StaleTapeError("tape has already been replayed")
        self.used = True
        upstream = np.asarray(upstream, dtype=DTYPE)
        if upstream.shape != out.value.shape:
            raise ValueError(f"upstream shape {upstream.shape} != output shape {out.value.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._values)
        grads[out.index] = upstream

        def acc(i, g):
            grads[i] = g if grads[i] is None else grads[i] + g

        for i in range(out.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            op = self._ops[i]
            kind = op[0]
            if kind in ("const", "param"):
                continue
            if kind == "matmul":
                a, b = self._values[op[1]], self._values[op[2]]
                acc(op[1], _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape))
                acc(op[2], _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape))
            elif kind == "add":
                acc(op[1], _unbroadcast(g, self._values[op[1]].shape))
                acc(op[2], _unbroadcast(g, self._values[op[2]].shape))
            elif kind == "map":
                _, dfn = ACTIVATIONS[op[2]]
                acc(op[1], g * dfn(self._values[op[1]], **op[3]))
            elif kind == "scale":
                acc(op[1], op[2] * g)
            elif kind == "mean":
                x = self._values[op[1]]
                n = x.shape[op[2]]
                acc(op[1], np.broadcast_to(np.expand_dims(g, op[2]) / n, x.shape).copy())
            elif kind == "masked_mean":
                _, src, axis, mask, safe = op
                acc(src, np.expand_dims(g / safe, axis) * mask)
            else:  # pragma: no cover
                raise RuntimeError(f"unknown op {kind}")

        return {
            name: (grads[i] if grads[i] is not None else np.zeros_like(self._values[i]))
            for name, i in self._params.items()
        }


# --- finite differences ----------------------------------------------------


_STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((2.0, 1.0, -1.0, -2.0), (-1 / 12, 8 / 12, -8 / 12, 1 / 12)),
    6: ((3.0, 2.0, 1.0, -1.0, -2.0, -3.0), (1 / 60, -3 / 20, 3 / 4, -3 / 4, 3 / 20, -1 / 60)),
}


def finite_diff_grad(f: Callable[[np.ndarray], float], theta, h: float = 1e-6, order: int = 2) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (any shape).

    ``order`` selects the 3-, 5- or 7-point stencil (2, 4 or 6).
    """
    if order not in _STENCILS:
        raise ValueError("order must be 2, 4 or 6")
    offsets, coefs = _STENCILS[order]
    theta = np.array(theta, dtype=DTYPE)
    flat = theta.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        total = 0.0
        for k, c in zip(offsets, coefs):
            flat[i] = orig + k * h
            val = float(f(theta))
            if not np.isfinite(val):
                flat[i] = orig
                raise NumericalError(f"non-finite function value at coordinate {i}")
            total += c * val
        flat[i] = orig
        grad[i] = total / h
    return grad.reshape(theta.shape)


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """One bias-corrected Adam descent step; mutates ``state``."""
    params = np.asarray(params, dtype=DTYPE)
    grads = np.asarray(grads, dtype=DTYPE)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: state {state.m.shape}, params {params.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads**2
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
