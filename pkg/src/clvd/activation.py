"""Scalar activations (Mish, ReLU, GELU) and their derivatives.

Every function accepts a Python float or a numpy array and works
elementwise; the tensor core calls the array versions.
"""

from __future__ import annotations

import enum

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


class ActivationKind(str, enum.Enum):
    MISH = "mish"
    RELU = "relu"
    GELU = "gelu"

    @classmethod
    def parse(cls, name) -> "ActivationKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).lower())
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown activation {name!r}; expected one of: {choices}") from None


def _arr(x):
    a = np.asarray(x)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    return a


def _out(x, y):
    return float(y) if np.ndim(x) == 0 else y


def softplus_stable(x):
    """ln(1 + e^x) without overflow; ``x + ln(1 + e^-x)`` for positive x."""
    a = _arr(x)
    with np.errstate(over="ignore", under="ignore"):
        y = np.where(a > 0, a + np.log1p(np.exp(-np.abs(a))), np.log1p(np.exp(np.minimum(a, 0))))
    return _out(x, y)


def logistic(x):
    a = _arr(x)
    with np.errstate(over="ignore", under="ignore"):
        e = np.exp(-np.abs(a))
        y = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _out(x, y)


def mish(x):
    """x * tanh(softplus(x))."""
    a = _arr(x)
    return _out(x, a * np.tanh(softplus_stable(a)))


def mish_prime(x):
    """Analytic derivative: tanh(s) + x * (1 - tanh(s)^2) * logistic(x), s = softplus(x)."""
    a = _arr(x)
    t = np.tanh(softplus_stable(a))
    return _out(x, t + a * (1.0 - t * t) * logistic(a))


def relu(x):
    a = _arr(x)
    return _out(x, np.maximum(a, 0))


def relu_prime(x):
    # subgradient at exactly 0 is 0
    a = _arr(x)
    return _out(x, (a > 0).astype(a.dtype))


def gelu(x):
    """GELU, tanh approximation."""
    a = _arr(x)
    return _out(x, 0.5 * a * (1.0 + np.tanh(_GELU_C * (a + _GELU_A * a**3))))


def gelu_prime(x):
    a = _arr(x)
    u = _GELU_C * (a + _GELU_A * a**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * a * a)
    return _out(x, 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)


FUNCTIONS = {
    ActivationKind.MISH: (mish, mish_prime),
    ActivationKind.RELU: (relu, relu_prime),
    ActivationKind.GELU: (gelu, gelu_prime),
}


def get(kind):
    """Return ``(function, derivative)`` for an activation kind or name."""
    return FUNCTIONS[ActivationKind.parse(kind)]
