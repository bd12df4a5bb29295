"""SGD and AdamW over named parameter arrays with per-group learning rates."""

from __future__ import annotations

from typing import Mapping

import numpy as np

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8


class Optimizer:
    """Updates ``params`` in place.

    ``lrs`` maps each parameter name to its learning rate, which is how the
    backbone and classifier groups get different step sizes. Weight decay is
    decoupled (``p -= lr * wd * p``) for both rules.
    """

    def __init__(self, kind: str, lrs: Mapping[str, float], weight_decay: float = 0.0):
        if kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        if any(lr <= 0 for lr in lrs.values()):
            raise ValueError("learning rates must be positive")
        self.kind = kind
        self.lrs = dict(lrs)
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if params[name].shape != g.shape:
                raise ValueError(f"{name}: param shape {params[name].shape} != grad shape {g.shape}")
        self.t += 1
        for name in sorted(self.lrs):
            if name not in grads:
                continue
            p, g, lr = params[name], grads[name], self.lrs[name]
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            if self.kind == "sgd":
                p -= lr * g
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= BETA1
            m += (1 - BETA1) * g
            v *= BETA2
            v += (1 - BETA2) * g * g
            m_hat = m / (1 - BETA1**self.t)
            v_hat = v / (1 - BETA2**self.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + EPS)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    group_lrs: Mapping[str, float],
    kind: str = "sgd",
    weight_decay: float = 0.0,
    state: Optimizer | None = None,
) -> dict[str, np.ndarray]:
    """One update on copies of ``params``; pass ``state`` to carry AdamW moments."""
    opt = state or Optimizer(kind, group_lrs, weight_decay)
    out = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    opt.step(out, {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()})
    return out
