"""Adam with bias correction over the named parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .unet import NetworkParams, grad_tensors, param_tensors

__all__ = ["AdamState", "adam_step"]


@dataclass
class AdamState:
    first_moment: dict
    second_moment: dict
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-4
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: NetworkParams, **kwargs) -> "AdamState":
        m = {name: np.zeros_like(t) for name, t in param_tensors(params)}
        v = {name: np.zeros_like(t) for name, t in param_tensors(params)}
        return cls(first_moment=m, second_moment=v, **kwargs)


def adam_step(params: NetworkParams, grads: dict, state: AdamState):
    """One in-place update; returns (params, state) for chaining.

    Aborts with RuntimeError if any gradient is non-finite, before any
    parameter is touched.
    """
    named_grads = dict(grad_tensors(grads))
    for name, g in named_grads.items():
        if not np.isfinite(g).all():
            raise RuntimeError("non-finite gradient in %s at step %d"
                               % (name, state.step_count + 1))
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in param_tensors(params):
        g = named_grads[name]
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (state.learning_rate * (m / c1)
              / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
