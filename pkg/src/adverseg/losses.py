"""Segmentation and adversarial losses as tape-recorded scalars.

Every loss accepts ``reduction="mean"`` (average over counted pixels, the
default) or ``"sum"`` (the literal pixel sum). Inputs may be single maps or
batches; the reduction runs over every pixel in the batch.
"""
from __future__ import annotations

import numpy as np

from . import IGNORE
from . import autograd as ag
from .autograd import ShapeError, Tensor

LOG_FLOOR = 1e-12
REDUCTIONS = ("mean", "sum")


class LossError(ValueError):
    pass


def _labels(target) -> np.ndarray:
    return np.asarray(getattr(target, "classes", target))


def _reduce(total: Tensor, count: int, reduction: str) -> Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return ag.scale(total, 1.0 / count)
    raise ValueError(f"unknown reduction {reduction!r}")


def mce_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Multi-class cross entropy, ``-sum log p[y]`` over non-IGNORE pixels."""
    y = _labels(target)
    c = pred.shape[-3]
    if pred.shape[:-3] + pred.shape[-2:] != y.shape:
        raise ShapeError(f"prediction {pred.shape} and labels {y.shape} disagree")
    valid = y != IGNORE
    count = int(valid.sum())
    if count == 0:
        raise LossError("every pixel is IGNORE")
    if np.any(y[valid] >= c):
        raise LossError(f"label id >= num_classes {c}")
    # one-hot selection mask, zero on IGNORE pixels
    sel = np.zeros(pred.shape, dtype=pred.dtype)
    yy = np.where(valid, y, 0)
    np.put_along_axis(sel, np.expand_dims(yy, -3), np.expand_dims(valid, -3).astype(pred.dtype), axis=-3)
    total = ag.scale(ag.sum(ag.mul(ag.log(pred, LOG_FLOOR), sel)), -1.0)
    return _reduce(total, count, reduction)


def bce_to_one(conf: Tensor, reduction: str = "mean") -> Tensor:
    """``-sum log conf``: every confidence pushed toward 1 (real)."""
    return _reduce(ag.scale(ag.sum(ag.log(conf, LOG_FLOOR)), -1.0), conf.size, reduction)


def bce_to_zero(conf: Tensor, reduction: str = "mean") -> Tensor:
    """``-sum log(1 - conf)``: every confidence pushed toward 0 (fake)."""
    return _reduce(ag.scale(ag.sum(ag.log(1.0 - conf, LOG_FLOOR)), -1.0), conf.size, reduction)


def adv_loss(conf: Tensor, reduction: str = "mean") -> Tensor:
    """Adversarial term for the generator: fool the discriminator at every pixel."""
    return bce_to_one(conf, reduction)


def disc_loss(conf_fake: Tensor, conf_real: Tensor, reduction: str = "mean") -> Tensor:
    """Discriminator objective: generated maps toward 0, ground truth toward 1."""
    if conf_fake.shape != conf_real.shape:
        raise ShapeError(f"fake {conf_fake.shape} vs real {conf_real.shape}")
    return ag.add(bce_to_zero(conf_fake, reduction), bce_to_one(conf_real, reduction))


def gen_loss(pred: Tensor, target, conf_on_pred: Tensor | None, lam: float,
             reduction: str = "mean") -> tuple[Tensor, Tensor, Tensor | None]:
    """``mce + lam * adv``. Returns ``(total, mce, adv)``; ``adv`` is None without a discriminator."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    mce = mce_loss(pred, target, reduction)
    if conf_on_pred is None:
        return mce, mce, None
    adv = adv_loss(conf_on_pred, reduction)
    return ag.add(mce, ag.scale(adv, lam)), mce, adv
