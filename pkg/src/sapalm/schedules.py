"""Stepsize rules, weight schedules and injected-noise models.

Stepsizes follow ``gamma_j^k = 1 / (a c_k (L_j + 2 L tau / sqrt(m)))`` with
``c_k`` chosen by the noise regime:

* ``summable``           c_k = 1
* ``alpha-diminishing``  c_k = (k + 1)^(1 - alpha)
* ``smooth-sqrt``        c_k = sqrt(k + 1)   (constant-variance noise, r = 0)
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = [
    "REGIMES",
    "NOISE_KINDS",
    "StepsizePolicy",
    "NoiseModel",
    "weight_c",
    "stepsize",
    "stepsizes",
    "noise_variance",
    "sample_noise",
    "minibatch_schedule",
    "worker_streams",
]

REGIMES = ("summable", "alpha-diminishing", "smooth-sqrt")
NOISE_KINDS = (
    "none",
    "gaussian-summable",
    "gaussian-diminishing",
    "minibatch",
    "gaussian-constant",
)
# summable representative: sigma_k^2 = sigma0^2 (k+1)^-1.5
SUMMABLE_EXPONENT = 1.5


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ParameterError(f"alpha must lie in (0, 1), got {alpha}")


@dataclass(frozen=True)
class StepsizePolicy:
    a: float = 2.0
    regime: str = "summable"
    alpha: float = 0.5
    tau: int = 0
    m: int = 1

    def __post_init__(self):
        if not self.a > 1.0:
            raise ParameterError(f"a must exceed 1, got {self.a}")
        if self.regime not in REGIMES:
            raise ParameterError(f"unknown regime {self.regime!r}; choose from {REGIMES}")
        if self.regime == "alpha-diminishing":
            _check_alpha(self.alpha)
        if self.tau < 0 or int(self.tau) != self.tau:
            raise ParameterError(f"tau must be a nonnegative integer, got {self.tau}")
        if self.m < 1:
            raise ParameterError(f"block count m must be >= 1, got {self.m}")

    def delay_term(self, L):
        return 2.0 * L * self.tau / math.sqrt(self.m)


def weight_c(k, regime, alpha=0.5):
    if k < 0:
        raise ParameterError(f"iteration must be >= 0, got {k}")
    if regime == "summable":
        return 1.0
    if regime == "alpha-diminishing":
        _check_alpha(alpha)
        return float((k + 1) ** (1.0 - alpha))
    if regime == "smooth-sqrt":
        return math.sqrt(k + 1)
    raise ParameterError(f"unknown regime {regime!r}")


def stepsize(policy, lipschitz, j, k):
    """``gamma_j^k`` for block ``j`` at iteration ``k``."""
    Lj = float(lipschitz.block[j])
    if not Lj > 0:
        raise ParameterError(f"L_{j} must be positive, got {Lj}")
    c = weight_c(k, policy.regime, policy.alpha)
    return 1.0 / (policy.a * c * (Lj + policy.delay_term(lipschitz.L)))


def stepsizes(policy, lipschitz, k):
    """All ``gamma_j^k`` at once."""
    c = weight_c(k, policy.regime, policy.alpha)
    return 1.0 / (policy.a * c * (lipschitz.block + policy.delay_term(lipschitz.L)))


@dataclass(frozen=True)
class NoiseModel:
    """Injected noise ``nu``. ``minibatch`` swaps the exact gradient for a
    sampled one with batch size ``minibatch_schedule(k, alpha, batch_base)``."""

    kind: str = "none"
    sigma0: float = 0.0
    alpha: float = 0.5
    batch_base: int = 4

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ParameterError(f"unknown noise kind {self.kind!r}; choose from {NOISE_KINDS}")
        if self.sigma0 < 0:
            raise ParameterError(f"sigma0 must be >= 0, got {self.sigma0}")
        if self.kind in ("gaussian-diminishing", "minibatch"):
            _check_alpha(self.alpha)
        if self.kind == "minibatch" and self.batch_base < 1:
            raise ParameterError(f"batch_base must be >= 1, got {self.batch_base}")

    @property
    def is_gaussian(self):
        return self.kind.startswith("gaussian")


def noise_variance(model, k):
    """Expected squared norm ``sigma_k^2`` of one block's noise sample."""
    s2 = model.sigma0**2
    if model.kind == "gaussian-summable":
        return s2 * (k + 1) ** (-SUMMABLE_EXPONENT)
    if model.kind == "gaussian-diminishing":
        return s2 * (k + 1) ** (-model.alpha)
    if model.kind == "gaussian-constant":
        return s2
    return 0.0


def sample_noise(model, k, j, size, rng):
    """Draw ``nu_j^k``: iid N(0, sigma_k^2 / size) entries, or zeros."""
    if not model.is_gaussian:
        return np.zeros(size)
    var = noise_variance(model, k)
    if var == 0.0:
        return np.zeros(size)
    return rng.normal(0.0, math.sqrt(var / size), size)


def minibatch_schedule(k, alpha, base):
    """Batch size ``ceil(base * (k+1)^alpha)``; variance then decays like (k+1)^-alpha."""
    _check_alpha(alpha)
    if base < 1:
        raise ParameterError(f"batch base must be >= 1, got {base}")
    return int(math.ceil(base * (k + 1) ** alpha))


def worker_streams(seed, worker=0):
    """Independent (block-selection, noise) generators for one worker.

    Worker 0 gets the streams the single-threaded engines use, so a
    one-worker async run replays a synchronous run exactly.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(worker),))
    sel, noise = ss.spawn(2)
    return np.random.default_rng(sel), np.random.default_rng(noise)
