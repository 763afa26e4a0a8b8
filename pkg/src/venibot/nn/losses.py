"""Loss functions. Each returns ``(loss, grad_wrt_pred)`` with mean reduction."""

import warnings

import numpy as np

from ..errors import ParameterError

BCE_CLAMP = 1e-7


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ParameterError(f"pred shape {pred.shape} != target shape {target.shape}")


def bce_loss(pred, target):
    """Mean binary cross-entropy of sigmoid outputs against {0, 1} targets."""
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_shapes(pred, target)
    p = np.clip(pred, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = pred.size
    loss = -np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    grad = (p - target) / (p * (1.0 - p)) / n
    # clamped region has zero derivative
    grad = np.where((pred < BCE_CLAMP) | (pred > 1.0 - BCE_CLAMP), 0.0, grad)
    return float(loss), grad.astype(pred.dtype, copy=False)


def l2_loss(pred, target, mask=None):
    """Mean squared error, optionally restricted to ``mask``-true elements.

    An all-false mask yields zero loss and zero gradient (with a warning).
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    _check_shapes(pred, target)
    diff = pred - target
    if mask is None:
        n = diff.size
        return float(np.mean(diff ** 2)), (2.0 / n) * diff
    mask = np.asarray(mask, dtype=bool)
    _check_shapes(pred, mask)
    n = int(mask.sum())
    if n == 0:
        warnings.warn("l2_loss: empty mask, loss defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0, np.zeros_like(pred)
    diff = np.where(mask, diff, 0.0)
    return float(np.sum(diff ** 2) / n), (2.0 / n) * diff
