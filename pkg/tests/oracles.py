"""Independent reference computations used by the tests.

Nothing here imports the library's numerical code paths; the oracles are
brute force on purpose.
"""

import numpy as np


def grid_min(fun, lo=-10.0, hi=10.0, step=1e-4):
    """Minimum of a vectorized scalar function on a grid, refined once.

    The coarse grid has spacing ``step``; the refinement re-grids
    ``[best - step, best + step]`` with 2001 points.
    """
    xs = np.arange(lo, hi + step / 2, step)
    vals = fun(xs)
    i = int(np.argmin(vals))
    fine = np.linspace(xs[i] - step, xs[i] + step, 2001)
    fv = fun(fine)
    i = int(np.argmin(fv))
    return float(fine[i]), float(fv[i])


def l1_penalty(lam):
    return lambda x: lam * np.abs(x)


def firm_penalty(lam, kappa):
    """``lam * (|x| - x^2 / (2 kappa))`` inside ``[-kappa, kappa]``, flat at ``lam kappa / 2`` outside."""

    def pen(x):
        a = np.abs(x)
        return lam * np.where(a <= kappa, a - a * a / (2 * kappa), kappa / 2)

    return pen


def with_quadratic(pen, mu):
    return lambda x: pen(x) + 0.5 * mu * x * x


def prox_objective(pen, y, gamma):
    return lambda x: pen(x) + (x - y) ** 2 / (2 * gamma)


def central_fd(fun, x, eps=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        g[i] = (fun(x + e) - fun(x - e)) / (2 * eps)
    return g


def factorization_loss(A, X, Y):
    """``0.5 ||A - X^T Y||_F^2`` by explicit double loop over entries."""
    n = A.shape[0]
    total = 0.0
    for i in range(n):
        for k in range(n):
            r = A[i, k] - float(np.dot(X[:, i], Y[:, k]))
            total += 0.5 * r * r
    return total


def unpack(x, n, d):
    """Flat iterate to ``(X, Y)`` of shape ``(d, n)``; the flat order is ``X^T`` then ``Y^T``."""
    U = x[: n * d].reshape(n, d)
    V = x[n * d:].reshape(n, d)
    return U.T.copy(), V.T.copy()


def dense_top_eig(G):
    return float(np.linalg.eigvalsh(G)[-1])


def tv_distance(p, q):
    return 0.5 * float(np.sum(np.abs(np.asarray(p) - np.asarray(q))))
