"""Soft Dice, L2 reconstruction and KL losses, their weighted sum, and the LR schedule.

Every loss returns ``(value, grad)`` with the gradient taken w.r.t. its first
argument(s), so the trainer can feed them straight into ``model.backward``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, ShapeError


@dataclass
class LossWeights:
    w_l2: float = 0.1
    w_kl: float = 0.1
    w_dice_wt: float = 0.33
    w_dice_tc: float = 0.33
    w_dice_et: float = 0.33
    smooth_s: float = 100.0
    # None: channels * voxels of the input patch
    kl_divisor: float | None = None

    def __post_init__(self):
        for name in ("w_l2", "w_kl", "w_dice_wt", "w_dice_tc", "w_dice_et"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")
        if self.smooth_s <= 0:
            raise ConfigError("smooth_s must be > 0")

    @property
    def dice_weights(self):
        return (self.w_dice_wt, self.w_dice_tc, self.w_dice_et)


@dataclass
class ScheduleParams:
    alpha0: float = 1e-4
    total_epochs: int = 50
    exponent: float = 0.9

    def __post_init__(self):
        if self.alpha0 <= 0 or self.total_epochs < 1:
            raise ConfigError("alpha0 must be > 0 and total_epochs >= 1")


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


def soft_dice_loss(y_pred, y_true, s=100.0):
    """``1 - (2*sum(t*p) + s) / (sum(t^2) + sum(p^2) + s)``.

    The smoothing term sits outside the factor 2, so a correct empty
    prediction costs 0 and the loss stays in [0, 1] for ``p`` in [0, 1].
    """
    y_pred = np.asarray(y_pred)
    y_true = np.asarray(y_true, dtype=y_pred.dtype)
    _same_shape(y_pred, y_true, "soft_dice_loss")
    p = y_pred.astype(np.float64)
    t = y_true.astype(np.float64)
    num = 2.0 * np.sum(t * p) + s
    den = np.sum(t * t) + np.sum(p * p) + s
    loss = 1.0 - num / den
    grad = -2.0 * t / den + num * 2.0 * p / (den * den)
    return float(loss), grad.astype(y_pred.dtype)


def l2_loss(recon, x):
    """Mean squared error over all elements."""
    recon = np.asarray(recon)
    x = np.asarray(x)
    _same_shape(recon, x, "l2_loss")
    diff = recon.astype(np.float64) - x
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 * diff / n).astype(recon.dtype)


def kl_loss(mu, logvar, n):
    """``(1/n) * sum(mu^2 + exp(logvar) - logvar - 1)``; returns ``(loss, grad_mu, grad_logvar)``."""
    mu = np.asarray(mu)
    logvar = np.asarray(logvar)
    _same_shape(mu, logvar, "kl_loss")
    if n <= 0:
        raise ValueError("kl_loss divisor must be positive")
    m = mu.astype(np.float64)
    lv = logvar.astype(np.float64)
    ev = np.exp(lv)
    loss = np.sum(m * m + ev - lv - 1.0) / n
    return float(loss), (2.0 * m / n).astype(mu.dtype), ((ev - 1.0) / n).astype(logvar.dtype)


REGIONS = ("wt", "tc", "et")


def combined_loss(out, x, regions, weights: LossWeights | None = None):
    """Weighted sum of reconstruction, KL and per-region Dice losses.

    ``regions`` is a ``[3, *patch]`` binary array ordered (wt, tc, et).
    Returns ``(total, terms, grads)`` where ``grads`` holds the gradients of
    the total w.r.t. ``seg_probs``, ``recon``, ``mu`` and ``logvar``.
    """
    weights = weights or LossWeights()
    seg = out.seg_probs
    regions = np.asarray(regions)
    _same_shape(seg, regions, "combined_loss seg/regions")
    terms = {}
    grad_seg = np.zeros_like(seg)
    total = 0.0
    for i, (name, w) in enumerate(zip(REGIONS, weights.dice_weights)):
        val, g = soft_dice_loss(seg[i], regions[i], weights.smooth_s)
        terms[f"dice_{name}"] = val
        total += w * val
        grad_seg[i] = w * g
    grads = {"seg_probs": grad_seg, "recon": None, "mu": None, "logvar": None}
    if out.recon is not None:
        val, g = l2_loss(out.recon, x)
        terms["l2"] = val
        total += weights.w_l2 * val
        grads["recon"] = weights.w_l2 * g
        n = weights.kl_divisor if weights.kl_divisor is not None else np.asarray(x).size
        val, gm, gl = kl_loss(out.mu, out.logvar, n)
        terms["kl"] = val
        total += weights.w_kl * val
        grads["mu"] = weights.w_kl * gm
        grads["logvar"] = weights.w_kl * gl
    return float(total), terms, grads


def lr_schedule(e, p: ScheduleParams | None = None):
    """Polynomial decay ``alpha0 * (1 - e/Ne) ** exponent``."""
    p = p or ScheduleParams()
    if e < 0 or e > p.total_epochs:
        raise RangeError(f"epoch {e} outside [0, {p.total_epochs}]")
    return p.alpha0 * (1.0 - e / p.total_epochs) ** p.exponent
