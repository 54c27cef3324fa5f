"""Adam over arbitrary keyed tensor collections.

Functional style: a step returns fresh parameter and state dicts, matching
the immutability of Tensor. This is the single optimizer used for merging
coefficients and for the toy training loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor

Params = Mapping[Hashable, Tensor]


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


def init_adam(params: Params, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    m = {key: Tensor.zeros(t.shape) for key, t in params.items()}
    v = {key: Tensor.zeros(t.shape) for key, t in params.items()}
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0, m=m, v=v)


def adam_step(state: AdamState, params: Params, grads: Params) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns (new params, new state)."""
    for key in params:
        if key not in grads:
            raise KeyError(f"missing gradient for {key}")
        if grads[key].shape != params[key].shape:
            raise ShapeError(
                f"gradient for {key} has shape {grads[key].shape}, "
                f"parameter has {params[key].shape}"
            )
        if not np.all(np.isfinite(grads[key].array)):
            raise NonFiniteError(f"non-finite gradient for {key}")

    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params: dict = {}
    new_m: dict = {}
    new_v: dict = {}
    for key, p in params.items():
        g = grads[key].array
        m = state.beta1 * state.m[key].array + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key].array + (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[key] = Tensor(p.array - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m[key] = Tensor(m)
        new_v[key] = Tensor(v)
    next_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        step=t, m=new_m, v=new_v,
    )
    return new_params, next_state
