"""Elementwise proximal operators and the regularizers built on them.

All operators act entrywise, so the prox of a block is the entrywise map.
The firm-thresholding penalty with weight ``lam`` and upper threshold
``kappa`` is

    lam * (|x| - x**2 / (2 kappa))   for |x| <= kappa
    lam * kappa / 2                  otherwise,

whose prox with stepsize ``gamma`` (``gamma * lam < kappa``) zeroes
``|y| <= gamma*lam`` and returns ``y`` unchanged above ``kappa``. The middle
band is stretched linearly onto ``(0, kappa]``.
"""

import numpy as np

from .errors import ParameterError
from .model import Regularizer

__all__ = [
    "prox_zero",
    "prox_l1",
    "prox_firm",
    "prox_with_quadratic",
    "firm_penalty",
    "ZeroReg",
    "L1Reg",
    "FirmReg",
    "QuadraticReg",
]


def prox_zero(y, gamma):
    return np.array(y, dtype=np.float64, copy=True)


def prox_l1(y, t):
    """Soft thresholding ``sign(y) * max(|y| - t, 0)``."""
    if t < 0:
        raise ParameterError(f"soft-threshold level must be >= 0, got {t}")
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.maximum(np.abs(y) - t, 0.0)


def prox_firm(y, gamma, lam, kappa):
    """Firm thresholding, the prox of ``gamma * lam * firm_penalty(., kappa)``."""
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if lam < 0 or not kappa > lam:
        raise ParameterError(f"firm thresholding needs 0 <= lam < kappa, got {lam}, {kappa}")
    t = gamma * lam
    if t >= kappa:
        raise ParameterError(
            f"gamma*lam = {t} >= kappa = {kappa}: firm threshold is degenerate"
        )
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y)
    mid = kappa * (a - t) / (kappa - t)
    mag = np.where(a <= t, 0.0, np.where(a <= kappa, mid, a))
    return np.sign(y) * mag


def prox_with_quadratic(base_prox, y, gamma, mu):
    """Prox of ``g + (mu/2)||.||^2`` given the prox of ``g``.

    Completing the square gives ``base_prox(y / (1 + gamma mu), gamma / (1 + gamma mu))``.
    """
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if mu < 0:
        raise ParameterError(f"quadratic weight must be >= 0, got {mu}")
    s = 1.0 + gamma * mu
    return base_prox(np.asarray(y, dtype=np.float64) / s, gamma / s)


def firm_penalty(x, kappa):
    """Unweighted firm penalty, summed over entries."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    return float(np.sum(np.where(a <= kappa, a - a * a / (2.0 * kappa), kappa / 2.0)))


class ZeroReg(Regularizer):
    def value(self, x):
        return 0.0

    def prox(self, y, gamma):
        return prox_zero(y, gamma)

    def __repr__(self):
        return "ZeroReg()"


class L1Reg(Regularizer):
    """``lam * ||x||_1``."""

    def __init__(self, lam):
        if lam < 0:
            raise ParameterError(f"lam must be >= 0, got {lam}")
        self.lam = float(lam)

    def value(self, x):
        return self.lam * float(np.sum(np.abs(x)))

    def prox(self, y, gamma):
        return prox_l1(y, gamma * self.lam)

    def __repr__(self):
        return f"L1Reg(lam={self.lam})"


class FirmReg(Regularizer):
    """``lam * firm_penalty(x, kappa)``; nonconvex for ``lam > 0``."""

    def __init__(self, lam, kappa):
        if lam < 0 or not kappa > lam:
            raise ParameterError(f"firm penalty needs 0 <= lam < kappa, got {lam}, {kappa}")
        self.lam = float(lam)
        self.kappa = float(kappa)

    def value(self, x):
        return self.lam * firm_penalty(x, self.kappa)

    def prox(self, y, gamma):
        return prox_firm(y, gamma, self.lam, self.kappa)

    def __repr__(self):
        return f"FirmReg(lam={self.lam}, kappa={self.kappa})"


class QuadraticReg(Regularizer):
    """``base(x) + (mu/2)||x||^2``."""

    def __init__(self, base, mu):
        if mu < 0:
            raise ParameterError(f"mu must be >= 0, got {mu}")
        self.base = base
        self.mu = float(mu)

    def value(self, x):
        return self.base.value(x) + 0.5 * self.mu * float(np.dot(x, x))

    def prox(self, y, gamma):
        return prox_with_quadratic(self.base.prox, y, gamma, self.mu)

    def __repr__(self):
        return f"QuadraticReg({self.base!r}, mu={self.mu})"
