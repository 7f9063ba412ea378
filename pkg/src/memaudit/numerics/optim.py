"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adaptive-moment optimizer over a dict of named parameter tensors.

    Parameters are updated in place so references held by a network stay
    valid across steps.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.state = OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray]):
        return adam_step(self.state, params, grads)


def adam_step(state: OptimizerState, params: Mapping[str, Tensor],
              grads: Mapping[str, np.ndarray]):
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {key!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = state.lr / (1.0 - b1 ** t)
    inv_c2 = 1.0 / np.sqrt(1.0 - b2 ** t)
    for key, p in params.items():
        g = grads[key]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        buf = np.multiply(g, 1.0 - b1, dtype=p.data.dtype)
        m *= b1
        m += buf
        np.multiply(g, g, out=buf)
        buf *= 1.0 - b2
        v *= b2
        v += buf
        np.sqrt(v, out=buf)
        buf *= inv_c2
        buf += state.eps
        np.divide(m, buf, out=buf)
        buf *= step_size
        p.data -= buf
    return params
