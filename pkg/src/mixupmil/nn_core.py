"""Small numpy kernel for the MIL heads: dense layers, activations, softmax,
soft-label cross-entropy, Adam and a central-difference gradient checker.

Layers operate on a single vector or row-wise on a matrix of inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mixupmil.rng import RngStream

LOG_CLAMP = 1e-12


class ShapeError(ValueError):
    pass


@dataclass
class DenseLayer:
    weight: np.ndarray  # out x in
    bias: np.ndarray  # out

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def glorot_uniform(n_in: int, n_out: int, rng: RngStream) -> np.ndarray:
    """(n_out, n_in) matrix, uniform in +-sqrt(6 / (n_in + n_out))."""
    limit = np.sqrt(6.0 / (n_in + n_out))
    return ((2.0 * rng.uniform((n_out, n_in)) - 1.0) * limit).astype(np.float32)


def init_dense(n_in: int, n_out: int, rng: RngStream) -> DenseLayer:
    return DenseLayer(glorot_uniform(n_in, n_out, rng), np.zeros(n_out, dtype=np.float32))


def affine(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"input has {x.shape[-1]} features, layer expects {layer.n_in}")
    return x @ layer.weight.T + layer.bias


def affine_backward(layer: DenseLayer, x: np.ndarray, grad: np.ndarray):
    """Returns (d_weight, d_bias, d_input) for upstream gradient ``grad``."""
    if x.ndim == 1:
        return np.outer(grad, x), grad.copy(), layer.weight.T @ grad
    return grad.T @ x, grad.sum(axis=0), grad @ layer.weight


def activation(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x: np.ndarray, y: np.ndarray, grad: np.ndarray, kind: str) -> np.ndarray:
    """Gradient w.r.t. the input ``x`` given output ``y = activation(x)``."""
    if kind == "relu":
        return grad * (x > 0)
    if kind == "tanh":
        return grad * (1 - y * y)
    if kind == "sigmoid":
        return grad * y * (1 - y)
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1 + ex)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(s: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax with output ``s``."""
    return s * (grad - np.sum(s * grad, axis=axis, keepdims=True))


def soft_cross_entropy(probs: np.ndarray, target: np.ndarray) -> float:
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} and target {target.shape} differ")
    return float(-np.sum(target * np.log(np.maximum(probs, LOG_CLAMP))))


def softmax_xent_grad(probs: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d/dlogits of ``soft_cross_entropy(softmax(logits), target)``."""
    return probs * np.sum(target) - target


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One in-place Adam step with bias correction."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {params[name].shape}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p)
            state.second_moment[name] = np.zeros_like(p)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


_CENTRAL_STENCILS = {
    2: ((1, 1 / 2),),
    4: ((1, 8 / 12), (2, -1 / 12)),
    6: ((1, 45 / 60), (2, -9 / 60), (3, 1 / 60)),
}


def grad_check(
    loss_fn: Callable[[], float],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    h: float = 1e-5,
    order: int = 2,
) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``loss_fn()`` evaluates the loss for the current contents of ``params``,
    which are perturbed in place (float64 only). ``order`` selects the 2-, 4-
    or 6th-order central stencil. Per entry the error is
    ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if order not in _CENTRAL_STENCILS:
        raise ValueError(f"order must be one of {sorted(_CENTRAL_STENCILS)}, got {order}")
    stencil = _CENTRAL_STENCILS[order]
    loss0 = loss_fn()
    if not np.isfinite(loss0):
        raise FloatingPointError("non-finite loss at the unperturbed parameters")
    worst = 0.0
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {name!r} is {p.dtype}")
        flat = p.reshape(-1)
        ana = np.asarray(analytic[name], dtype=np.float64).reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            num = 0.0
            for step, coef in stencil:
                flat[k] = orig + step * h
                up = loss_fn()
                flat[k] = orig - step * h
                down = loss_fn()
                flat[k] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss while perturbing {name}[{k}]")
                num += coef * (up - down)
            num /= h
            err = abs(ana[k] - num) / max(1e-8, abs(ana[k]) + abs(num))
            worst = max(worst, err)
    return worst
