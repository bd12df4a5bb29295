"""Loss values and their analytic gradients with respect to logits.

All logarithms are natural. The debiased cross-entropy scales each old-entity
logit by ``delta`` inside the competing-class sum::

    loss = log(1 + sum_{y != target} exp(s_y * phi_y - phi_target))

with ``s_y = delta`` for old entity classes and ``1`` for O and new classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import NumericalError

ROLE_O, ROLE_OLD, ROLE_NEW = 0, 1, 2


@dataclass(frozen=True)
class HyperParams:
    delta: float = 0.5
    alpha: float = 1.0  # weight of the prototype loss
    beta: float = 1.0  # weight of the distillation loss
    kd_temperature: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if not self.kd_temperature > 0:
            raise ValueError("kd_temperature must be positive")


@dataclass(frozen=True)
class ClassPartition:
    """Role of each of the C visible classes: O (index 0), old entity, or new entity."""

    roles: tuple[int, ...]

    def __post_init__(self):
        roles = tuple(int(r) for r in self.roles)
        object.__setattr__(self, "roles", roles)
        if not roles or roles[0] != ROLE_O or ROLE_O in roles[1:]:
            raise ValueError("exactly one O class, at index 0, is required")
        if any(r not in (ROLE_OLD, ROLE_NEW) for r in roles[1:]):
            raise ValueError(f"unknown role in {roles!r}")

    @classmethod
    def from_counts(cls, num_old: int, num_new: int) -> "ClassPartition":
        return cls((ROLE_O,) + (ROLE_OLD,) * num_old + (ROLE_NEW,) * num_new)

    @property
    def num_classes(self) -> int:
        return len(self.roles)

    @property
    def old(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == ROLE_OLD)

    @property
    def new(self) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self.roles) if r == ROLE_NEW)

    def scale(self, delta: float) -> np.ndarray:
        s = np.ones(len(self.roles))
        s[np.asarray(self.roles) == ROLE_OLD] = delta
        return s


@dataclass
class LossBreakdown:
    ce_debias: float
    pro: float
    kd: float
    total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite {what}")


def _scaled_ce(logits: np.ndarray, targets: np.ndarray, scale: np.ndarray):
    """Row-wise debiased CE and its logit gradient.

    ``z = s * phi - phi_target``; the target entry of ``z`` is exactly 0 (its
    scale is 1), which supplies the leading ``1 +`` term of the loss.
    """
    n = len(targets)
    rows = np.arange(n)
    z = logits * scale - logits[rows, targets][:, None]
    z[rows, targets] = 0.0
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    tot = e.sum(axis=1, keepdims=True)
    loss = m[:, 0] + np.log(tot[:, 0])
    p = e / tot
    grad = scale * p
    grad[rows, targets] = -(1.0 - p[rows, targets])
    return loss, grad


def _prep(logits, target, scale):
    logits = np.asarray(logits, dtype=np.float64)
    _check_finite(logits, "logits")
    if not 0 <= target < logits.shape[-1]:
        raise ValueError(f"target {target} out of range for {logits.shape[-1]} classes")
    if scale[target] != 1.0:
        raise ValueError("target must be O or a current-task class")
    return logits[None, :], np.array([target])


def ce_loss(logits, target: int) -> float:
    """Standard cross-entropy ``log(1 + sum_{y != t} exp(phi_y - phi_t))``."""
    scale = np.ones(np.shape(logits)[-1])
    l, t = _prep(logits, target, scale)
    return float(_scaled_ce(l, t, scale)[0][0])


def ce_grad(logits, target: int) -> np.ndarray:
    scale = np.ones(np.shape(logits)[-1])
    l, t = _prep(logits, target, scale)
    return _scaled_ce(l, t, scale)[1][0]


def debiased_ce_loss(logits, target: int, partition: ClassPartition, delta: float) -> float:
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    scale = partition.scale(delta)
    l, t = _prep(logits, target, scale)
    return float(_scaled_ce(l, t, scale)[0][0])


def debiased_ce_grad(logits, target: int, partition: ClassPartition, delta: float) -> np.ndarray:
    """Gradient of :func:`debiased_ce_loss` with respect to the logits."""
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    scale = partition.scale(delta)
    l, t = _prep(logits, target, scale)
    return _scaled_ce(l, t, scale)[1][0]


def debiased_ce_batch(logits: np.ndarray, targets: np.ndarray, scale: np.ndarray):
    """Per-token losses (N,) and logit gradients (N, C) for a token batch."""
    _check_finite(logits, "logits")
    return _scaled_ce(np.asarray(logits, dtype=np.float64), np.asarray(targets), scale)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))


def kd_batch(old_probs: np.ndarray, new_logits: np.ndarray, temperature: float = 1.0):
    """Distillation cross-entropy per token and its gradient w.r.t. all new logits.

    New logits are cut to the old model's width before the tempered softmax,
    so the extra (new-class) columns receive zero gradient.
    """
    old_probs = np.atleast_2d(np.asarray(old_probs, dtype=np.float64))
    new_logits = np.atleast_2d(np.asarray(new_logits, dtype=np.float64))
    c_old = old_probs.shape[1]
    if c_old > new_logits.shape[1]:
        raise ValueError(f"old model has {c_old} classes, new only {new_logits.shape[1]}")
    if np.any(np.abs(old_probs.sum(axis=1) - 1.0) > 1e-6) or np.any(old_probs < 0):
        raise ValueError("old_probs rows must be probability vectors")
    _check_finite(new_logits, "logits")
    logq = log_softmax(new_logits[:, :c_old] / temperature)
    loss = -(old_probs * logq).sum(axis=1)
    grad = np.zeros_like(new_logits)
    grad[:, :c_old] = (np.exp(logq) - old_probs) / temperature
    return loss, grad


def kd_loss(old_probs, new_logits, temperature: float = 1.0) -> float:
    return float(kd_batch(old_probs, new_logits, temperature)[0][0])


def _proto_arrays(prototypes):
    if len(prototypes) == 0:
        raise ValueError("at least one prototype is required")
    labels = np.array([int(c) for c, _ in prototypes])
    vecs = np.stack([np.asarray(v, dtype=np.float64) for _, v in prototypes])
    return labels, vecs


def prototype_loss_and_grad(
    prototypes: Sequence[tuple[int, np.ndarray]], cls_W: np.ndarray, cls_b: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed CE of each stored prototype under the current classifier.

    Returns (loss, d cls_W, d cls_b). Prototypes are constants.
    """
    labels, vecs = _proto_arrays(prototypes)
    c = cls_W.shape[1]
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"prototype class out of range for {c} classes")
    logits = vecs @ cls_W + cls_b
    _check_finite(logits, "prototype logits")
    lsm = log_softmax(logits)
    rows = np.arange(len(labels))
    loss = -lsm[rows, labels].sum()
    d = np.exp(lsm)
    d[rows, labels] -= 1.0
    return float(loss), vecs.T @ d, d.sum(axis=0)


def prototype_loss(prototypes, cls_W, cls_b) -> float:
    return prototype_loss_and_grad(prototypes, np.asarray(cls_W, float), np.asarray(cls_b, float))[0]


def total_loss(ce: float, pro: float, kd: float, hp: HyperParams) -> float:
    vals = np.array([ce, pro, kd], dtype=np.float64)
    _check_finite(vals, "loss component")
    return ce + hp.alpha * pro + hp.beta * kd
