"""Training objectives over density maps and predicted counts.

All functions take and return ``Tensor`` objects so they compose into one
differentiable graph.  Hinge terms use ReLU, whose subgradient at the hinge
point is 0, so a constraint that holds exactly (with slack 0) back-propagates
nothing.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidArgumentError, InvalidShapeError

BCE_CLAMP = 1e-12


@dataclass
class LossBreakdown:
    mse: float = 0.0
    bce: float = 0.0
    wi: float = 0.0
    ai: float = 0.0
    total: float = 0.0
    stage: str = "source"

    def as_dict(self):
        return asdict(self)


def mse_loss(pred, target):
    """(1 / 2N) * sum_i ||target_i - pred_i||^2 over a batch of N maps.

    ``pred`` is a Tensor with a leading batch axis; ``target`` an array (or a
    list of arrays / DensityMaps) of the same shape.
    """
    if isinstance(target, (list, tuple)):
        target = np.stack([getattr(t, "grid", t) for t in target])
    target = np.asarray(target, dtype=np.float64)
    if isinstance(pred, (list, tuple)):
        pred = T.concat([p if p.ndim == target.ndim else T.reshape(p, (1,) + p.shape) for p in pred])
    if pred.shape != target.shape:
        if pred.size == target.size and pred.shape[0] == target.shape[0]:
            target = target.reshape(pred.shape)
        else:
            raise InvalidShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    if n < 1:
        raise InvalidShapeError("mse_loss needs at least one map")
    diff = pred.data - target
    value = np.array(T.seq_sum(diff * diff) / (2.0 * n))
    return T.make_op(value, (pred,), lambda g: (float(g) * diff / n,))


def bce_loss(prob, label):
    """Binary cross-entropy averaged over elements; ``prob`` is clamped to [1e-12, 1 - 1e-12]."""
    prob = T.as_tensor(prob)
    y = np.broadcast_to(np.asarray(label, dtype=np.float64), prob.shape)
    if np.any((y != 0) & (y != 1)):
        raise InvalidArgumentError("bce labels must be 0 or 1")
    p = prob.data
    inside = (p >= BCE_CLAMP) & (p <= 1.0 - BCE_CLAMP)
    pc = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = max(p.size, 1)
    per = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    value = np.array(T.seq_sum(per) / n)

    def backward(g):
        d = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n
        return (float(g) * np.where(inside, d, 0.0),)

    return T.make_op(value, (prob,), backward)


def within_image_loss(count_full, count_sub, m=0.0):
    """max(0, -(C_full - C_sub) + m), elementwise."""
    count_full, count_sub = T.as_tensor(count_full), T.as_tensor(count_sub)
    return T.relu(T.add(T.sub(count_sub, count_full), float(m)))


def across_image_loss(count_a, count_b, count_a_sub, count_b_sub, m=0.0):
    """Ordering hinge between the sub-image counts of two images, elementwise.

    When ``C_a >= C_b`` the loss is ``max(0, -(C_aSub - C_bSub) + m)``, else the
    mirrored hinge.  The comparison of the full-image counts only selects the
    branch; no gradient flows through it.
    """
    ca = T.as_tensor(count_a).data
    cb = T.as_tensor(count_b).data
    sign = np.where(ca >= cb, 1.0, -1.0)
    diff = T.sub(T.as_tensor(count_a_sub), T.as_tensor(count_b_sub))
    signed = diff * sign if diff.ndim == 0 else T.mul(diff, T.Tensor(sign))
    return T.relu(T.add(T.neg(signed), float(m)))


def _check_weights(**weights):
    for name, w in weights.items():
        if not w >= 0:
            raise InvalidArgumentError(f"loss weight {name} must be >= 0, got {w}")


def weighted_sum(terms):
    """Sum of ``weight * term`` over (weight, term) pairs, skipping zero weights.

    Zero-weighted terms are left out of the graph entirely, so e.g. a zero
    across-image weight reproduces the within-image objective bit for bit.
    """
    total = None
    for weight, term in terms:
        if term is None or weight == 0:
            continue
        term = T.as_tensor(term)
        piece = term if weight == 1 else T.mul(term, float(weight))
        total = piece if total is None else T.add(total, piece)
    return T.Tensor(0.0) if total is None else total


def compose_dma(mse, bce, alpha):
    """Adversarial objective: mse + alpha * bce."""
    _check_weights(alpha=alpha)
    return weighted_sum([(1.0, mse), (alpha, bce)])


def compose_cwi(dma, wi, lambda1):
    """Within-image objective: dma + lambda1 * wi."""
    _check_weights(lambda1=lambda1)
    return weighted_sum([(1.0, dma), (lambda1, wi)])


def compose_cai(dma, wi_a, wi_b, ai, lambda1, lambda2):
    """Across-image objective: dma + lambda1 * (wi_a + wi_b) + lambda2 * ai."""
    _check_weights(lambda1=lambda1, lambda2=lambda2)
    return weighted_sum([(1.0, dma), (lambda1, wi_a), (lambda1, wi_b), (lambda2, ai)])
