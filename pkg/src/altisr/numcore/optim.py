"""ADAM optimizer state and update step."""

from __future__ import annotations

import numpy as np

from .params import ParamSet


class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    def __init__(
        self,
        params: ParamSet,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected ADAM update in place.

    Every parameter must have a populated gradient. Gradients are left
    untouched; callers zero them between steps.
    """
    missing = [name for name, t in params.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: missing gradients for {missing}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
