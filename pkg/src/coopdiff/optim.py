"""Adam updates with bias correction, over lists of tape leaves."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tape import Node

Array = np.ndarray


@dataclass
class AdamState:
    """Per-parameter first/second moment accumulators and step count."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[Array] = field(default_factory=list)
    v: list[Array] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Node], lr: float = 1e-4, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
        return state


def adam_step(
    params: list[Node],
    grads: list[Array],
    state: AdamState,
    lr: float | None = None,
) -> AdamState:
    """One Adam update; rebinds each parameter's ``.value`` in place.

    update = lr * m_hat / (sqrt(v_hat) + eps)
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError(
            f"got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} moment buffers"
        )
    step_lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.value.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"shape {p.value.shape}"
            )
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.value = p.value - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state
