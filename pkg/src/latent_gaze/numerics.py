"""Small differentiable kernel shared by every model in the package.

Each layer is a pair of plain functions: ``*_forward`` returns the output plus
whatever the backward pass needs, ``*_backward`` turns an upstream gradient
into input and parameter gradients.  Everything is batch-first: a vector input
of shape ``(n,)`` is treated as a batch of one.

The default dtype is float32.  Passing float64 arrays runs the same code in
double precision, which is what the gradient checks use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

DTYPE = np.float32
BCE_CLAMP = 1e-7


class ContractError(ValueError):
    """An operation was called with inputs outside its contract."""


class Param:
    """A named trainable array together with its gradient buffer."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape}, dtype={self.value.dtype})"


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 1:
        return x[None, :], True
    return x, False


# -- dense -------------------------------------------------------------------

def dense_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine map ``W @ x + b`` applied row-wise to a batch."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ContractError(
            f"dense shape mismatch: x{x.shape}, W{W.shape}, b{b.shape}"
        )
    return x @ W.T + b


def dense_backward(x: np.ndarray, W: np.ndarray, dy: np.ndarray):
    """Return ``(dx, dW, db)``; parameter gradients are summed over the batch."""
    xb, single = _as_batch(x)
    dyb, _ = _as_batch(dy)
    dW = dyb.T @ xb
    db = dyb.sum(axis=0)
    dx = dyb @ W
    return (dx[0] if single else dx), dW, db


# -- layer normalization -----------------------------------------------------

def layer_norm_forward(x, scale, shift, eps: float = 1e-5):
    """Standardize each row of ``x`` and apply a per-feature affine map."""
    if x.shape[-1] < 2:
        raise ContractError("layer_normalize needs at least 2 features")
    if eps <= 0:
        raise ContractError("eps must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv, scale)


def layer_norm_backward(dy, cache):
    xhat, inv, scale = cache
    yb, single = _as_batch(dy)
    xh, _ = _as_batch(xhat)
    iv = inv if inv.ndim == 2 else inv[None, :]
    dscale = (yb * xh).sum(axis=0)
    dshift = yb.sum(axis=0)
    dxhat = yb * scale
    n = xh.shape[-1]
    dx = iv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
               - xh * (dxhat * xh).sum(axis=-1, keepdims=True) / n)
    return (dx[0] if single else dx), dscale, dshift


# -- activations ---------------------------------------------------------------

def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(x, dy):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "relu": (relu, relu_backward),
    "gelu": (gelu, gelu_backward),
}


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x) if np.issubdtype(np.asarray(x).dtype, np.floating)
                      else np.asarray(x, dtype=np.float64))
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out[0] if scalar else out


# -- losses --------------------------------------------------------------------

def cosine_distance(g1, g2):
    """``1 - cos(g1, g2)`` row-wise.  Returns a scalar for 1-D inputs."""
    g1 = np.asarray(g1)
    g2 = np.asarray(g2)
    n1 = np.linalg.norm(g1, axis=-1)
    n2 = np.linalg.norm(g2, axis=-1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ContractError("cosine_distance of a zero-norm vector")
    return 1.0 - (g1 * g2).sum(axis=-1) / (n1 * n2)


def cosine_distance_grad(g1, g2):
    """Gradient of :func:`cosine_distance` with respect to ``g1``."""
    n1 = np.linalg.norm(g1, axis=-1, keepdims=True)
    n2 = np.linalg.norm(g2, axis=-1, keepdims=True)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise ContractError("cosine_distance of a zero-norm vector")
    u1 = g1 / n1
    u2 = g2 / n2
    cos = (u1 * u2).sum(axis=-1, keepdims=True)
    return -(u2 - cos * u1) / n1


def binary_cross_entropy(p, v):
    p = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(v * np.log(p) + (1.0 - v) * np.log1p(-p))


def binary_cross_entropy_logit_grad(logit, v):
    """d BCE(sigmoid(logit), v) / d logit, zero where the clamp is active."""
    p = sigmoid(logit)
    active = (p > BCE_CLAMP) & (p < 1.0 - BCE_CLAMP)
    return (p - v) * active


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.learning_rate <= 0:
            raise ContractError("Adam epsilon and learning rate must be positive")


def adam_step(params: Iterable[Param], state: AdamState, lr: float | None = None) -> None:
    """One bias-corrected Adam update.  Gradients are zeroed afterwards.

    A non-finite gradient aborts the whole step before any parameter moves.
    """
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    lr = state.learning_rate if lr is None else lr
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.value)
            state.second_moment[p.name] = np.zeros_like(p.value)
        v = state.second_moment[p.name]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / bc2)
        denom += state.epsilon
        p.value -= ((lr / bc1) * m / denom).astype(p.value.dtype, copy=False)
        p.zero_grad()


# -- gradient checking ---------------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], x: np.ndarray,
                               eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (any shape).

    ``x`` is evaluated in float64.  Raises :class:`ContractError` if ``f``
    returns a non-finite value anywhere on the stencil.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ContractError(f"non-finite function value near index {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation normalized by the larger gradient magnitude."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)
