from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` are dicts of arrays keyed identically.  Parameters
    and moment estimates are updated in place (so layers holding references see
    the new values); returns ``(params, state)``.
    """
    if params.keys() != grads.keys():
        raise ContractError("params and grads have different keys")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ContractError(f"gradient shape {grads[name].shape} != parameter shape {p.shape} for {name}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ContractError(f"optimizer state for {name} has shape {state.m[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state
