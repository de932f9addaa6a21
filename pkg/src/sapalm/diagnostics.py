"""Convergence diagnostics: stationarity residual, Lyapunov function, P_T, delays."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StructureError
from .model import objective

__all__ = [
    "StationaritySurrogate",
    "stationarity",
    "lyapunov",
    "lyapunov_from_steps",
    "pt_weights",
    "sample_PT",
    "delay_stats",
    "running_min",
    "fit_rate_slope",
]


@dataclass
class StationaritySurrogate:
    value: float
    per_block: np.ndarray
    gammas: np.ndarray
    source: str = "current"


def stationarity(problem, x, gammas, grad=None, noise=None):
    """Scaled prox-gradient residual ``sum_j ||(w_j - x_j)/gamma_j + nu_j||^2``.

    ``w_j = prox_{gamma_j r_j}(x_j - gamma_j (g_j + nu_j))``. By default
    ``g`` is the exact gradient at ``x`` and ``nu = 0``; pass a delayed
    gradient and the realized noise for the faithful per-iteration value.
    With ``r = 0`` and no noise this is exactly ``||grad f(x)||^2``.
    """
    lay = problem.layout
    x = lay.check(x)
    gammas = np.asarray(gammas, dtype=np.float64)
    if gammas.shape != (lay.m,):
        raise StructureError(f"need {lay.m} stepsizes, got shape {gammas.shape}")
    if np.any(~(gammas > 0)):
        raise ParameterError("stepsizes must be positive")
    g = problem.loss.full_gradient(x) if grad is None else np.asarray(grad, dtype=np.float64)
    nu = np.zeros_like(x) if noise is None else np.asarray(noise, dtype=np.float64)
    gs = gammas[lay.owner]
    w = problem.prox_all(x - gs * (g + nu), gammas)
    resid = (w - x) / gs + nu
    per_block = np.add.reduceat(resid * resid, lay.offsets[:-1])
    source = "current" if grad is None and noise is None else "supplied"
    return StationaritySurrogate(float(per_block.sum()), per_block, gammas, source)


def lyapunov(problem, z, L, m=None):
    """``Phi(z) = F(z[0]) + L/(2 sqrt m) sum_{h=1}^{tau} (tau-h+1) ||z[h] - z[h-1]||^2``.

    ``z`` is the history ``(x^k, x^{k-1}, ..., x^{k-tau})``, newest first.
    """
    if len(z) < 1:
        raise StructureError("history must hold at least the current iterate")
    m = problem.m if m is None else m
    tau = len(z) - 1
    steps = [float(np.sum((z[h] - z[h - 1]) ** 2)) for h in range(1, tau + 1)]
    return lyapunov_from_steps(objective(problem, z[0]), steps, L, m, tau)


def lyapunov_from_steps(obj, steps, L, m, tau):
    """Same value from the objective and the recent squared step lengths.

    ``steps[h-1] = ||x^{k-h+1} - x^{k-h}||^2``, newest first; missing
    entries (before iteration 0) count as zero.
    """
    if len(steps) > tau:
        raise StructureError(f"{len(steps)} steps for delay bound {tau}")
    acc = 0.0
    for h, s in enumerate(steps, start=1):
        acc += (tau - h + 1) * s
    return obj + L / (2.0 * math.sqrt(m)) * acc


def pt_weights(T, c):
    """Normalized ``P_T(k) ∝ 1/c_k`` on ``{0..T}``; ``c`` is a callable or array."""
    if T < 0:
        raise ParameterError(f"T must be >= 0, got {T}")
    ks = np.arange(T + 1)
    cs = np.asarray([c(k) for k in ks] if callable(c) else c[: T + 1], dtype=np.float64)
    w = 1.0 / cs
    return w / w.sum()


def sample_PT(T, c, rng, size=None):
    """Draw iteration indices from ``P_T``."""
    p = pt_weights(T, c)
    return rng.choice(T + 1, size=size, p=p)


def delay_stats(trace):
    """``{"max": int, "histogram": {delay: count}}`` from a run trace."""
    hist = np.asarray(trace.delay_hist)
    nz = np.nonzero(hist)[0]
    return {
        "max": int(trace.summary.get("max_delay", nz.max() if nz.size else 0)),
        "histogram": {int(d): int(hist[d]) for d in nz},
    }


def running_min(values):
    return np.minimum.accumulate(np.asarray(values, dtype=np.float64))


def fit_rate_slope(ks, values, start_fraction=0.5):
    """Least-squares slope of ``log min_{i<=k} S_i`` against ``log k``.

    Only checkpoints with ``k >= start_fraction * max(k)`` and ``k > 0`` enter
    the fit, discarding burn-in.
    """
    ks = np.asarray(ks, dtype=np.float64)
    mins = running_min(values)
    sel = (ks > 0) & (ks >= start_fraction * ks.max()) & (mins > 0)
    if sel.sum() < 2:
        raise ParameterError("not enough positive checkpoints to fit a slope")
    slope, _ = np.polyfit(np.log(ks[sel]), np.log(mins[sel]), 1)
    return float(slope)
