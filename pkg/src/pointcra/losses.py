"""Task loss, the calibration regularizer and the channel decorrelation loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import tensor as T
from .diffnet.tensor import ShapeError, Tensor


class LossError(ValueError):
    pass


def cross_entropy(logits, labels, smoothing: float = 0.0) -> Tensor:
    """Mean label-smoothed negative log-likelihood over the rows of ``logits``."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if not 0.0 <= smoothing < 1.0:
        raise LossError(f"smoothing must lie in [0, 1), got {smoothing}")
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} do not match {labels.shape[0]} labels")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LossError(f"label out of range [0, {k})")
    target = np.full(logits.shape, smoothing / k)
    target[np.arange(labels.shape[0]), labels] += 1.0 - smoothing
    logp = T.log_softmax(logits, axis=-1)
    return -(logp * target).sum() * (1.0 / labels.shape[0])


def bound_penalty(c, phi_l: float, phi_h: float) -> Tensor:
    """Two-sided softplus hinge keeping ``c`` inside [phi_l, phi_h]."""
    c = T.as_tensor(c)
    return T.softplus(phi_l - c) + T.softplus(c - phi_h)


def reg_loss(a, b, c, phi_l: float, phi_h: float) -> Tensor:
    """``mean softplus(b) + mean softplus(1 - a) + bound_penalty(c)`` for one stage.

    ``a`` and ``b`` may be per-group vectors; the means reduce them.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    return T.softplus(b).mean() + T.softplus(1.0 - a).mean() + bound_penalty(c, phi_l, phi_h).sum()


def reg_loss_stages(stages, phi_l: float, phi_h: float) -> Tensor:
    """Average of :func:`reg_loss` over ``[(a, b, c), ...]``."""
    if not stages:
        return Tensor(0.0)
    terms = [reg_loss(a, b, c, phi_l, phi_h) for a, b, c in stages]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def orth_loss(w, centered: bool = False) -> Tensor:
    """Mean |cosine| over ordered pairs of distinct channel weight vectors.

    ``w`` is ``(..., C)``; every leading entry is one point pair.  Channels
    with zero norm contribute 0 to their pairs.  ``centered=True`` removes
    each channel's mean first (Pearson correlation).
    """
    w = T.as_tensor(w)
    c = w.shape[-1]
    if c < 2:
        raise LossError("orthogonality loss needs at least two channels")
    flat = w.reshape(-1, c)
    if centered:
        flat = flat - flat.mean(axis=0, keepdims=True)
    gram = T.matmul(T.transpose(flat), flat)
    n2 = (flat * flat).sum(axis=0)
    ok_c = n2.data >= 1e-24
    ok = (ok_c[:, None] & ok_c[None, :]).astype(np.float64)
    off = 1.0 - np.eye(c)
    den = T.sqrt(n2.reshape(c, 1) * n2.reshape(1, c) + (1.0 - ok))
    cos = gram * (ok * off) / den
    return T.absolute(cos).sum() * (1.0 / (c * (c - 1)))


def orth_loss_stages(ws, centered=False) -> Tensor:
    if not ws:
        return Tensor(0.0)
    total = orth_loss(ws[0], centered)
    for w in ws[1:]:
        total = total + orth_loss(w, centered)
    return total * (1.0 / len(ws))


@dataclass
class LossBreakdown:
    task: Tensor
    reg: Tensor
    orth: Tensor
    total: Tensor
    lambda1: float
    lambda2: float

    def values(self):
        return {
            "task": float(self.task.data),
            "reg": float(self.reg.data),
            "orth": float(self.orth.data),
            "total": float(self.total.data),
        }


def total_loss(task, reg, orth, lambda1: float = 0.1, lambda2: float = 0.1) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise LossError("loss weights must be nonnegative")
    task, reg, orth = T.as_tensor(task), T.as_tensor(reg), T.as_tensor(orth)
    total = task
    if lambda1:
        total = total + reg * lambda1
    if lambda2:
        total = total + orth * lambda2
    return LossBreakdown(task, reg, orth, total, lambda1, lambda2)
