"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalDivergence


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params, grads, state, lr):
    """One Adam update.  ``params`` and ``grads`` are lists of arrays; returns
    the new parameter arrays.  ``state`` is advanced in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


@dataclass
class Adam:
    """Stateful wrapper updating ``Tensor`` parameters from their ``.grad``."""

    params: list
    lr: float = 1e-3
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like([p.values for p in self.params])

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [np.zeros_like(p.values) if p.grad is None else p.grad for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise NumericalDivergence(f"non-finite gradient for {p.name}")
        new = adam_step([p.values for p in self.params], grads, self.state, self.lr)
        for p, v in zip(self.params, new):
            if not np.all(np.isfinite(v)):
                raise NumericalDivergence(f"non-finite value after update of {p.name}")
            p.values = v
