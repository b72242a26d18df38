"""Dense float64 kernels with hand-written vector-Jacobian products.

Every matrix is a 2-D ``numpy.ndarray`` of dtype float64 stored row-major,
and token features are rows. The backward helpers return gradients with
respect to their inputs; parameter gradients are accumulated by the callers
that compose the model graph.

GELU is the tanh approximation::

    gelu(x) = 0.5 * x * (1 + tanh(sqrt(2 / pi) * (x + 0.044715 * x**3)))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import DimensionError, DomainError, EvaluationError

Matrix = np.ndarray

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715
_BROADCAST_LIMIT = 1 << 16


def as_matrix(x) -> Matrix:
    m = np.array(x, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product whose inner sum runs in ascending index order.

    Results do not depend on BLAS blocking or thread count. Small products
    reduce a broadcast ``n x k x m`` array along a non-contiguous axis,
    which numpy accumulates slice by slice; larger ones loop over the inner
    index explicitly. Both paths add the same terms in the same order.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    # The reduced axis must not be the contiguous one, or numpy switches to
    # pairwise summation: hence C order and more than one output column.
    if b.shape[1] > 1 and a.shape[0] * a.shape[1] * b.shape[1] <= _BROADCAST_LIMIT:
        return np.multiply(a[:, :, None], b[None, :, :], order="C").sum(axis=1)
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def softmax(v) -> np.ndarray:
    """Softmax of a 1-D vector, computed with max-subtraction."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DomainError("softmax needs a non-empty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax input must be finite")
    e = np.exp(v - v.max())
    return e / e.sum()


def softmax_rows(x: Matrix) -> Matrix:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] == 0:
        raise DomainError("softmax needs a non-empty vector")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p: Matrix, dp: Matrix) -> Matrix:
    """Gradient w.r.t. the logits given row-softmax output ``p`` and ``dL/dp``."""
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    x = np.asarray(x, dtype=np.float64)
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def gelu(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "gelu": (gelu, gelu_grad),
}


def activation(kind: str, x):
    try:
        fn, _ = ACTIVATIONS[kind]
    except KeyError:
        raise DomainError(f"unknown activation {kind!r}") from None
    return fn(x)


def activation_grad(kind: str, x):
    return ACTIVATIONS[kind][1](x)


def layernorm_rows(x: Matrix, gain, bias, eps: float = 1e-5):
    """Row-wise layer normalisation. Returns ``(y, cache)``."""
    x = np.asarray(x, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64).reshape(-1)
    bias = np.asarray(bias, dtype=np.float64).reshape(-1)
    if not (x.shape[1] == gain.size == bias.size):
        raise DimensionError(
            f"layernorm width {x.shape[1]} does not match gain {gain.size} / bias {bias.size}")
    if eps <= 0:
        raise DomainError("layernorm eps must be positive")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def layernorm_backward(cache, dy: Matrix):
    """Returns ``(dx, dgain, dbias)``."""
    xhat, inv, gain = cache
    dgain = np.sum(dy * xhat, axis=0)
    dbias = np.sum(dy, axis=0)
    dxhat = dy * gain
    n = xhat.shape[1]
    dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=1, keepdims=True) / n)
    return dx, dgain, dbias


def layernorm(v, gain, bias, eps: float = 1e-5) -> np.ndarray:
    """Layer normalisation of a single vector."""
    v = np.asarray(v, dtype=np.float64).reshape(1, -1)
    y, _ = layernorm_rows(v, gain, bias, eps)
    return y[0]


@dataclass
class Param:
    """A trainable tensor together with its accumulated gradient."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} differs from value shape {self.value.shape}")

    @property
    def shape(self):
        return self.value.shape


def zero_grads(params: Iterable[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def grad_check_report(fn: Callable[[], float], params: Mapping[str, np.ndarray],
                      analytic: Mapping[str, np.ndarray], h: float = 1e-5,
                      coords: Mapping[str, np.ndarray] | None = None) -> dict[str, float]:
    """Compare analytic gradients against central differences, per tensor.

    ``fn`` is evaluated with no arguments and must read the arrays in
    ``params``, which are perturbed in place and restored afterwards.
    ``coords`` optionally restricts each tensor to a set of flat indices.
    The error of one coordinate is ``|a - fd| / max(1, |fd|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise DomainError(f"finite-difference step {h} outside [1e-6, 1e-4]")
    report = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        grad = np.asarray(analytic[name]).reshape(-1)
        idx = range(flat.size) if coords is None or name not in coords else coords[name]
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn()
            flat[i] = orig - h
            f_minus = fn()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise EvaluationError(f"non-finite value while perturbing {name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, abs(grad[i] - fd) / max(1.0, abs(fd)))
        report[name] = worst
    return report


def grad_check(fn, params, analytic, h: float = 1e-5, coords=None) -> float:
    """Maximum relative error over all checked coordinates."""
    report = grad_check_report(fn, params, analytic, h, coords)
    return max(report.values(), default=0.0)
