"""
Module
------
lossmath.py: Soft Dice loss and dice score

Summary
-------
Soft Dice loss over real-valued prediction masks and binary ground truth, its quadratic variant, the
analytic gradients of both, the set-overlap dice score, and a central finite-difference check of the
gradients.

Notes
-----
Sums run over every voxel and are accumulated in float64 whatever the storage precision.
"""
import logging
from dataclasses import dataclass

import numpy as np

from MISPar import config
from MISPar.exceptions import ShapeError, InvalidEpsilon, RangeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class VolumePair:
    """Prediction mask in [0, 1] and binary ground truth of identical shape"""
    pred: np.ndarray
    truth: np.ndarray

    def __post_init__(self):
        pred = np.asarray(self.pred, dtype=np.float64)
        truth = np.asarray(self.truth, dtype=np.float64)
        if pred.shape != truth.shape:
            raise ShapeError('VolumePair', f'prediction {pred.shape} and truth {truth.shape} differ')
        if pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
            raise RangeError('VolumePair', 'prediction values outside [0, 1]')
        if not np.all((truth == 0.0) | (truth == 1.0)):
            raise RangeError('VolumePair', 'ground truth must be 0 or 1')
        object.__setattr__(self, 'pred', pred)
        object.__setattr__(self, 'truth', truth)


def _pair(pred, truth, operation):
    try:
        return pred if isinstance(pred, VolumePair) else VolumePair(pred, truth)
    except ShapeError as err:
        raise ShapeError(operation, err.message) from None


def _check_epsilon(eps, operation):
    if not eps > 0:
        raise InvalidEpsilon(operation, f'smoothing epsilon must be positive, got {eps}')


def _sums(p, y):
    """sum(p*y), sum(p) and sum(y) in one pass, as the 2x2 product of [p, 1] and [y, 1]"""
    ones = np.ones(p.size)
    m = np.stack([p.ravel(), ones]) @ np.stack([y.ravel(), ones]).T
    return float(m[0, 0]), float(m[0, 1]), float(m[1, 0])


def _squares(p, y):
    """sum(p*y), sum(p*p) and sum(y*y) in one pass, from the Gram matrix of [p, y]"""
    s = np.stack([p.ravel(), y.ravel()])
    m = s @ s.T
    return float(m[0, 1]), float(m[0, 0]), float(m[1, 1])


def _soft(p, y, eps):
    overlap, sp, sy = _sums(p, y)
    return 1.0 - (2.0 * overlap + eps) / (sp + sy + eps)


def _quadratic(p, y, eps):
    overlap, spp, syy = _squares(p, y)
    return 1.0 - (2.0 * overlap + eps) / (spp + syy + eps)


def dice_loss(pred, truth=None, eps=config.deployment.epsilon):
    """Soft Dice loss 1 - (2 sum(p*y) + eps) / (sum(p) + sum(y) + eps)

    :param pred: prediction mask, or a VolumePair (truth then ignored)
    :param truth: binary ground truth
    :param eps: smoothing constant (Optional, Default=0.1)
    :type eps: float
    :rtype: float
    """
    _check_epsilon(eps, 'dice_loss')
    pair = _pair(pred, truth, 'dice_loss')
    return _soft(pair.pred, pair.truth, eps)


def dice_loss_grad(pred, truth=None, eps=config.deployment.epsilon):
    """Gradient of dice_loss with respect to the prediction

    With A = 2 sum(p*y) + eps and B = sum(p) + sum(y) + eps, element k is -(2 y_k B - A) / B**2.
    """
    _check_epsilon(eps, 'dice_loss_grad')
    pair = _pair(pred, truth, 'dice_loss_grad')
    overlap, sp, sy = _sums(pair.pred, pair.truth)
    a = 2.0 * overlap + eps
    b = sp + sy + eps
    return -(2.0 * pair.truth * b - a) / (b * b)


def quadratic_dice_loss(pred, truth=None, eps=config.deployment.epsilon):
    """Quadratic soft Dice loss 1 - (2 sum(p*y) + eps) / (sum(p**2) + sum(y**2) + eps)"""
    _check_epsilon(eps, 'quadratic_dice_loss')
    pair = _pair(pred, truth, 'quadratic_dice_loss')
    return _quadratic(pair.pred, pair.truth, eps)


def quadratic_dice_loss_grad(pred, truth=None, eps=config.deployment.epsilon):
    """Gradient of quadratic_dice_loss: -(2 y_k Q - 2 A p_k) / Q**2 with Q = sum(p**2) + sum(y**2) + eps"""
    _check_epsilon(eps, 'quadratic_dice_loss_grad')
    pair = _pair(pred, truth, 'quadratic_dice_loss_grad')
    p, y = pair.pred, pair.truth
    overlap, spp, syy = _squares(p, y)
    a = 2.0 * overlap + eps
    q = spp + syy + eps
    return -(2.0 * y * q - 2.0 * a * p) / (q * q)


def dice_score(pred_binary, truth):
    """Dice score 2|A n B| / (|A| + |B|) on masks, predictions thresholded at 0.5

    Two empty masks score 1.0.
    """
    pred_binary = np.asarray(pred_binary)
    truth = np.asarray(truth)
    if pred_binary.shape != truth.shape:
        raise ShapeError('dice_score', f'prediction {pred_binary.shape} and truth {truth.shape} differ')
    a = pred_binary >= 0.5
    b = truth >= 0.5
    size = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if size == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / size


def central_difference(loss, p, y, eps, h=1e-6):
    """Central finite-difference gradient of ``loss(p, y, eps)`` with respect to p"""
    grad = np.empty_like(p)
    flat_p = p.reshape(-1)
    flat_g = grad.reshape(-1)
    for k in range(flat_p.size):
        keep = flat_p[k]
        flat_p[k] = keep + h
        up = loss(p, y, eps)
        flat_p[k] = keep - h
        down = loss(p, y, eps)
        flat_p[k] = keep
        flat_g[k] = (up - down) / (2.0 * h)
    return grad


def _relative_deviation(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-12)))


def gradient_check(seed=0, cases=100, shape=(2, 2, 2), eps=config.deployment.epsilon, h=1e-6):
    """Compare analytic gradients against central differences on seeded random pairs

    Predictions are drawn from [0.05, 0.95] so the perturbed points stay inside [0, 1].

    :return: max relative deviation per loss, keys 'soft' and 'quadratic'
    :rtype: dict
    """
    rng = np.random.default_rng(seed)
    worst = {'soft': 0.0, 'quadratic': 0.0}
    for _ in range(cases):
        p = rng.uniform(0.05, 0.95, size=shape)
        y = (rng.random(shape) < 0.5).astype(np.float64)
        pair = VolumePair(p, y)
        soft = _relative_deviation(dice_loss_grad(pair, eps=eps), central_difference(_soft, p.copy(), y, eps, h))
        quad = _relative_deviation(quadratic_dice_loss_grad(pair, eps=eps),
                                   central_difference(_quadratic, p.copy(), y, eps, h))
        worst['soft'] = max(worst['soft'], soft)
        worst['quadratic'] = max(worst['quadratic'], quad)
    logger.debug('gradient check over %d cases: %s', cases, worst)
    return worst
