"""Detection and uncertainty losses, written against the autodiff primitives.

All functions accept numpy arrays or :class:`~collabcp.autodiff.Tensor` and
return a scalar tensor, so they serve both as training objectives and as
plain evaluators (``loss_cls(z, t).item()``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class LossWeights:
    w_reg: float = 1.0
    w_cls: float = 1.0
    w_uq: float = 1.0

    def __post_init__(self):
        if not all(np.isfinite([self.w_reg, self.w_cls, self.w_uq])):
            raise ValueError("loss weights must be finite")


@dataclass
class LossBreakdown:
    l_reg: float
    l_cls: float
    l_uq: float
    total: float


def _check_shapes(a, b, what: str) -> None:
    if tuple(np.shape(a.data if isinstance(a, ad.Tensor) else a)) != tuple(
        np.shape(b.data if isinstance(b, ad.Tensor) else b)
    ):
        raise ad.ShapeError(f"{what}: shape mismatch")


softplus = ad.softplus


def loss_cls(logits, targets) -> ad.Tensor:
    """Mean binary cross-entropy over all cells, from logits."""
    _check_shapes(logits, targets, "loss_cls")
    t = np.asarray(targets.data if isinstance(targets, ad.Tensor) else targets, dtype=np.float64)
    z = ad.tensor(logits)
    return ad.mean(softplus(z) - z * t)


def _masked_mean(values: ad.Tensor, mask: np.ndarray) -> ad.Tensor:
    count = float(mask.sum())
    if count == 0:
        return ad.sum(values * 0.0)
    return ad.sum(values * mask) * (1.0 / count)


def _broadcast_mask(mask, shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    while mask.ndim < len(shape):
        mask = mask[..., None]
    return np.broadcast_to(mask, shape)


def loss_reg(pred_boxes, target_boxes, mask) -> ad.Tensor:
    """Mean squared error over coordinates of responsible cells; 0 when none are."""
    _check_shapes(pred_boxes, target_boxes, "loss_reg")
    pred = ad.tensor(pred_boxes)
    m = _broadcast_mask(mask, pred.shape)
    return _masked_mean(ad.square(pred - np.asarray(target_boxes) * m), m)


def loss_uq(pred_boxes, target_boxes, sigma, mask) -> ad.Tensor:
    """Gaussian KL-style loss ``r^2 / (2 sigma^2) + log sigma`` over masked coordinates."""
    _check_shapes(pred_boxes, target_boxes, "loss_uq")
    _check_shapes(pred_boxes, sigma, "loss_uq")
    pred = ad.tensor(pred_boxes)
    sig = ad.tensor(sigma)
    m = _broadcast_mask(mask, pred.shape)
    if np.any(sig.data[m > 0] <= 0):
        raise ValueError("sigma must be positive on masked entries")
    log_sigma = ad.log(ad.clamp(sig, SIGMA_FLOOR))
    return _masked_mean(_gaussian_terms(pred, np.asarray(target_boxes), log_sigma, m), m)


def loss_uq_from_log_variance(pred_boxes, target_boxes, log_variance, mask) -> ad.Tensor:
    """Same loss as :func:`loss_uq` with sigma = exp(log_variance / 2)."""
    pred = ad.tensor(pred_boxes)
    m = _broadcast_mask(mask, pred.shape)
    log_sigma = ad.clamp(0.5 * ad.tensor(log_variance), np.log(SIGMA_FLOOR))
    return _masked_mean(_gaussian_terms(pred, np.asarray(target_boxes), log_sigma, m), m)


def _gaussian_terms(pred: ad.Tensor, target: np.ndarray, log_sigma: ad.Tensor, m) -> ad.Tensor:
    # masked entries only; unmasked residuals are zeroed so they cannot overflow
    resid = (pred - target * m) * m
    return 0.5 * ad.square(resid) * ad.exp(-2.0 * log_sigma) + log_sigma


def total_loss(l_reg, l_cls, l_uq, weights: LossWeights = LossWeights()):
    """Weighted sum; returns ``(total_tensor, breakdown)``."""
    parts = [ad.tensor(v) for v in (l_reg, l_cls, l_uq)]
    total = weights.w_reg * parts[0] + weights.w_cls * parts[1] + weights.w_uq * parts[2]
    breakdown = LossBreakdown(*(p.item() for p in parts), total=total.item())
    return total, breakdown
