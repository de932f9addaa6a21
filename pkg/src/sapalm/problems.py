"""Matrix-factorization test problems.

Both problems share the smooth loss ``f(X, Y) = 0.5 ||A - X^T Y||_F^2`` with
``X, Y`` of shape ``(d, n)``:

* sparse PCA        r(X) = lam ||X||_1, same for Y
* firm-PCA          r(X) = lam firm(X; kappa) + (mu/2)||X||_F^2, same for Y

The flat iterate stores ``U = X^T`` then ``V = Y^T`` (each ``n x d``,
row-major), so column ``i`` of ``X`` is the contiguous slice
``x[i*d:(i+1)*d]``. Two block layouts are offered:

``factor``  m = 2 blocks, ``X`` and ``Y``.
``column``  m = 2n blocks of size d, one per column of ``X`` and of ``Y``.
            The loss decouples over the columns of each factor, so this is
            the granularity at which workers sweep "coordinates".
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, StructureError
from .model import BlockLayout, LipschitzInfo, ProblemInstance, SmoothLoss
from .prox import FirmReg, L1Reg, QuadraticReg

__all__ = [
    "LAYOUTS",
    "FactorizationData",
    "FactorizationState",
    "FactorizationLoss",
    "generate_data",
    "save_data",
    "load_data",
    "init_state",
    "power_iteration",
    "spca_value",
    "spca_partial_grad",
    "estimate_lipschitz",
    "minibatch_gradient",
    "spca_instance",
    "firm_pca_instance",
]

LAYOUTS = ("factor", "column")
LIPSCHITZ_FLOOR = 1e-8
DEFAULT_RHO = 1.1

_MAGIC = b"SPLM"
_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


@dataclass
class FactorizationData:
    A: np.ndarray
    n: int
    seed: int
    d: int = None

    def __post_init__(self):
        self.A = np.ascontiguousarray(self.A, dtype=np.float64)
        if self.A.shape != (self.n, self.n):
            raise StructureError(f"A has shape {self.A.shape}, expected ({self.n}, {self.n})")
        self.A.setflags(write=False)


@dataclass
class FactorizationState:
    """Factors ``X, Y`` of shape ``(d, n)``."""

    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape != self.Y.shape:
            raise StructureError(f"X {self.X.shape} and Y {self.Y.shape} must share shape (d, n)")

    @property
    def d(self):
        return self.X.shape[0]

    @property
    def n(self):
        return self.X.shape[1]

    def to_flat(self):
        return np.concatenate([self.X.T.ravel(), self.Y.T.ravel()])

    @classmethod
    def from_flat(cls, x, n, d):
        x = np.asarray(x, dtype=np.float64)
        if x.size != 2 * n * d:
            raise StructureError(f"flat iterate has {x.size} entries, expected {2 * n * d}")
        U = x[: n * d].reshape(n, d)
        V = x[n * d:].reshape(n, d)
        return cls(U.T.copy(), V.T.copy())


def generate_data(n, seed, d=None):
    """``n x n`` matrix of iid standard normals, drawn row-major from ``default_rng(seed)``."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    A = np.random.default_rng(int(seed)).standard_normal((n, n))
    return FactorizationData(A=A, n=int(n), seed=int(seed), d=d)


def save_data(data, path):
    """Write ``A`` as ``SPLM`` header (magic, u32 version, u64 n, u64 seed) + LE float64 payload."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, data.n, data.seed))
        fh.write(np.ascontiguousarray(data.A, dtype="<f8").tobytes())


def load_data(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise StructureError(f"{path}: truncated header")
        magic, version, n, seed = _HEADER.unpack(head)
        if magic != _MAGIC:
            raise StructureError(f"{path}: bad magic {magic!r}")
        if version != _VERSION:
            raise StructureError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 8 * n * n:
        raise StructureError(f"{path}: payload has {len(payload)} bytes, expected {8 * n * n}")
    A = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, n)
    return FactorizationData(A=A, n=int(n), seed=int(seed))


def init_state(n, d, seed):
    """Factors with iid N(0, 1/sqrt(d)) entries, so X^T Y has unit-variance entries."""
    rng = np.random.default_rng([int(seed), 1])
    std = d ** -0.25
    return FactorizationState(rng.normal(0.0, std, (d, n)), rng.normal(0.0, std, (d, n)))


def power_iteration(G, max_iter=100, tol=1e-8):
    """Largest eigenvalue of a symmetric PSD matrix."""
    G = np.asarray(G, dtype=np.float64)
    d = G.shape[0]
    # deterministic start, not orthogonal to any coordinate axis
    v = 1.0 + np.arange(d) / (2.0 * d)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0.0:
            return 0.0
        v = w / nrm
        new = float(v @ G @ v)
        if abs(new - lam) <= tol * abs(new):
            return new
        lam = new
    return lam


def _uv(x, n, d):
    return x[: n * d].reshape(n, d), x[n * d:].reshape(n, d)


class FactorizationLoss(SmoothLoss):
    """``0.5 ||A - U V^T||_F^2`` on the flat ``(U, V)`` iterate."""

    def __init__(self, A, d, layout="factor", rho=DEFAULT_RHO):
        if layout not in LAYOUTS:
            raise ParameterError(f"unknown layout {layout!r}; choose from {LAYOUTS}")
        if rho < 1:
            raise ParameterError(f"rho must be >= 1, got {rho}")
        self.A = np.asarray(A, dtype=np.float64)
        self.At = np.ascontiguousarray(self.A.T)
        self.n = n = self.A.shape[0]
        self.d = int(d)
        self.kind = layout
        self.rho = float(rho)
        nd = n * self.d
        self._nd = nd
        if layout == "factor":
            self.layout = BlockLayout([nd, nd])
        else:
            self.layout = BlockLayout(
                [self.d] * (2 * n), groups=[range(n), range(n, 2 * n)]
            )

    def __getstate__(self):
        # At is derived; rebuild it on unpickle to halve transfer size
        state = self.__dict__.copy()
        del state["At"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.At = np.ascontiguousarray(self.A.T)

    def residual(self, x):
        U, V = _uv(x, self.n, self.d)
        return self.A - U @ V.T

    def value(self, x):
        R = self.residual(x)
        return 0.5 * float(np.einsum("ij,ij->", R, R))

    def full_gradient(self, x):
        U, V = _uv(x, self.n, self.d)
        R = self.A - U @ V.T
        return np.concatenate([(-(R @ V)).ravel(), (-(R.T @ U)).ravel()])

    def partial_gradient(self, j, x):
        n, d = self.n, self.d
        U, V = _uv(x, n, d)
        if self.kind == "factor":
            R = self.A - U @ V.T
            if j == 0:
                return (-(R @ V)).ravel()
            if j == 1:
                return (-(R.T @ U)).ravel()
        self.layout.check_index(j)
        if j < n:
            r = self.A[j] - V @ U[j]
            return -(r @ V)
        l = j - n
        r = self.At[l] - U @ V[l]
        return -(r @ U)

    def stochastic_gradient(self, j, x, batch_size, rng):
        idx = rng.integers(0, self.n, int(batch_size))
        return self.batch_gradient(j, x, idx)

    def batch_gradient(self, j, x, idx):
        """Unbiased estimate of ``partial_gradient(j, x)`` from summation indices ``idx``.

        The gradient of either factor is a sum over ``n`` rank-one terms
        (columns of the residual for ``X``, rows for ``Y``); the estimate
        keeps the sampled terms and rescales by ``n / len(idx)``.
        """
        idx = np.asarray(idx)
        if idx.size == 0:
            raise ParameterError("minibatch must be nonempty")
        n, d = self.n, self.d
        if idx.min() < 0 or idx.max() >= n:
            raise StructureError(f"minibatch indices must lie in [0, {n})")
        scale = n / idx.size
        U, V = _uv(x, n, d)
        if self.kind == "factor":
            if j == 0:
                Vb = V[idx]
                Rb = self.At[idx] - Vb @ U.T  # rows are residual columns
                return (-scale * (Rb.T @ Vb)).ravel()
            if j == 1:
                Ub = U[idx]
                Rb = self.A[idx] - Ub @ V.T
                return (-scale * (Rb.T @ Ub)).ravel()
        self.layout.check_index(j)
        if j < n:
            Vb = V[idx]
            r = self.A[j, idx] - Vb @ U[j]
            return -scale * (r @ Vb)
        l = j - n
        Ub = U[idx]
        r = self.At[l, idx] - Ub @ V[l]
        return -scale * (r @ Ub)

    def factor_lipschitz(self, x):
        """``(L_X, L_Y) = rho * (||V^T V||_2, ||U^T U||_2)``, floored at 1e-8."""
        U, V = _uv(x, self.n, self.d)
        LX = max(self.rho * power_iteration(V.T @ V), LIPSCHITZ_FLOOR)
        LY = max(self.rho * power_iteration(U.T @ U), LIPSCHITZ_FLOOR)
        return LX, LY

    def lipschitz(self, x):
        LX, LY = self.factor_lipschitz(x)
        if self.kind == "factor":
            block = np.array([LX, LY])
        else:
            block = np.repeat([LX, LY], self.n)
        return LipschitzInfo(block=block, L=max(LX, LY), rho=self.rho)

    def gradient_support(self, j):
        n, d, nd = self.n, self.d, self._nd
        if self.kind == "factor":
            return [slice(0, 2 * nd)]
        if j < n:
            return [slice(j * d, (j + 1) * d), slice(nd, 2 * nd)]
        l = j - n
        return [slice(0, nd), slice(nd + l * d, nd + (l + 1) * d)]

    def refresh_interval(self):
        """Default Lipschitz refresh cadence: about one sweep of one factor."""
        return 1 if self.kind == "factor" else self.n


def _check_shapes(data, state):
    if state.n != data.n:
        raise StructureError(f"state has n={state.n}, data has n={data.n}")


def spca_value(data, state, lam):
    """``0.5||A - X^T Y||_F^2 + lam (||X||_1 + ||Y||_1)``."""
    _check_shapes(data, state)
    R = data.A - state.X.T @ state.Y
    return 0.5 * float(np.sum(R * R)) + lam * float(np.abs(state.X).sum() + np.abs(state.Y).sum())


def spca_partial_grad(data, state, block):
    """Gradient of the smooth part w.r.t. ``'X'`` or ``'Y'``, shape ``(d, n)``."""
    _check_shapes(data, state)
    R = data.A - state.X.T @ state.Y
    if block == "X":
        return -(state.Y @ R.T)
    if block == "Y":
        return -(state.X @ R)
    raise StructureError(f"block must be 'X' or 'Y', got {block!r}")


def estimate_lipschitz(state, block, rho=DEFAULT_RHO):
    """``L_X = rho ||Y Y^T||_2`` or ``L_Y = rho ||X X^T||_2`` via power iteration."""
    if block == "X":
        G = state.Y @ state.Y.T
    elif block == "Y":
        G = state.X @ state.X.T
    else:
        raise StructureError(f"block must be 'X' or 'Y', got {block!r}")
    return max(rho * power_iteration(G), LIPSCHITZ_FLOOR)


def minibatch_gradient(data, state, block, batch):
    """Unbiased minibatch estimate of ``spca_partial_grad``; ``batch`` is an index array.

    Indices may repeat (iid sampling with replacement).
    """
    _check_shapes(data, state)
    loss = FactorizationLoss(data.A, state.d, "factor", rho=1.0)
    j = {"X": 0, "Y": 1}.get(block)
    if j is None:
        raise StructureError(f"block must be 'X' or 'Y', got {block!r}")
    g = loss.batch_gradient(j, state.to_flat(), np.asarray(batch))
    return g.reshape(state.n, state.d).T.copy()


def spca_instance(data, d, lam, layout="factor", rho=DEFAULT_RHO):
    if lam < 0:
        raise ParameterError(f"lam must be >= 0, got {lam}")
    loss = FactorizationLoss(data.A, d, layout, rho)
    reg = L1Reg(lam)
    meta = {"problem": "spca", "n": data.n, "d": int(d), "lam": float(lam), "layout": layout}
    return ProblemInstance(loss.layout, loss, [reg] * loss.layout.m, meta)


def firm_pca_instance(data, d, lam, kappa, mu, layout="factor", rho=DEFAULT_RHO):
    """Firm-thresholding PCA; the quadratic term lives in the regularizer."""
    if mu < 0:
        raise ParameterError(f"mu must be >= 0, got {mu}")
    loss = FactorizationLoss(data.A, d, layout, rho)
    firm = FirmReg(lam, kappa)
    reg = QuadraticReg(firm, mu) if mu > 0 else firm
    meta = {
        "problem": "firm-pca", "n": data.n, "d": int(d), "lam": float(lam),
        "kappa": float(kappa), "mu": float(mu), "layout": layout,
    }
    return ProblemInstance(loss.layout, loss, [reg] * loss.layout.m, meta)
