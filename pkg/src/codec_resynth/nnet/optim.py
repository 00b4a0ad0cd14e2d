"""Adam with decoupled weight decay, and a warmup + linear-decay schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# peak learning rates per method, as swept for the full-scale models
PEAK_LR = {"c2f": 1e-4, "onestep": 5e-4, "bridge": 5e-4}


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              hyper: AdamHyper | None = None):
    """One in-place Adam update; returns ``(params, state)``.

    Weight decay is decoupled: parameters are scaled by ``1 - lr * wd``
    before the moment-based step. Non-finite gradients are rejected and leave
    both parameters and state untouched.
    """
    hyper = hyper or AdamHyper()
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError("parameter, gradient and state shapes differ")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient; step rejected")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    state.m *= b1
    state.m += (1 - b1) * grads
    state.v *= b2
    state.v += (1 - b2) * grads * grads
    m_hat = state.m / (1 - b1**state.step)
    v_hat = state.v / (1 - b2**state.step)
    if hyper.weight_decay:
        params *= 1.0 - hyper.lr * hyper.weight_decay
    params -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return params, state


def lr_at(step: int, peak: float, warmup_steps: int, total_steps: int) -> float:
    """Linear ramp 0 -> peak over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if not 0 < warmup_steps < total_steps:
        raise ValueError("need 0 < warmup_steps < total_steps")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= total_steps:
        return 0.0
    if step <= warmup_steps:
        return peak * step / warmup_steps
    return peak * (total_steps - step) / (total_steps - warmup_steps)
