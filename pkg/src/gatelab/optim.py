"""SGD and Adam updates as pure (params, state) -> (params, state) transitions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bptt import GradientSet
from .models import Params


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, size: int):
        return cls(np.zeros(size), np.zeros(size), 0)

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["m"], dtype=np.float64), np.asarray(d["v"], dtype=np.float64), int(d["step"]))


def _flat_grad(p: Params, g):
    flat = g.flat if isinstance(g, GradientSet) else np.asarray(g, dtype=np.float64)
    if flat.size != p.flat().size:
        raise ValueError(f"gradient has {flat.size} entries, params have {p.flat().size}")
    return flat


def sgd_step(p: Params, g, mu: float) -> Params:
    """theta <- theta - mu * g, with g already averaged over the batch."""
    if mu < 0:
        raise ValueError("learning rate must be non-negative")
    return p.with_flat(p.flat() - mu * _flat_grad(p, g))


def adam_step(p: Params, g, state: AdamState, mu: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ValueError("beta1 and beta2 must lie in (0, 1)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    grad = _flat_grad(p, g)
    if state.m.shape != grad.shape:
        raise ValueError("Adam state does not match the parameter count")
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    theta = p.flat() - mu * m_hat / (np.sqrt(v_hat) + eps)
    return p.with_flat(theta), AdamState(m, v, step)
