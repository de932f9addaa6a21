"""Block-structured problem model.

Problems have the form ``f(x_1, ..., x_m) + sum_j r_j(x_j)`` with ``f``
smooth and each ``r_j`` proper and lower semicontinuous. An iterate is a
single flat float64 array; a :class:`BlockLayout` maps block ``j`` to the
contiguous slice ``[offsets[j], offsets[j + 1])``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError, StructureError

__all__ = [
    "BlockLayout",
    "LipschitzInfo",
    "SmoothLoss",
    "Regularizer",
    "ProblemInstance",
    "objective",
    "partial_gradient",
    "select_prox",
]


class BlockLayout:
    """Partition of a flat vector into ``m`` contiguous blocks.

    Parameters
    ----------
    sizes : sequence of int
        Block sizes ``n_1, ..., n_m``; all must be positive.
    groups : sequence of sequence of int, optional
        Families of blocks sharing a role (e.g. all columns of one factor).
        Used by dedicated block selection. Defaults to one group per block.
    """

    def __init__(self, sizes, groups=None):
        sizes = np.asarray(sizes, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size == 0 or np.any(sizes <= 0):
            raise StructureError("block sizes must be a nonempty list of positive ints")
        self.sizes = sizes
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.m = int(sizes.size)
        self.size = int(self.offsets[-1])
        if groups is None:
            groups = [[j] for j in range(self.m)]
        self.groups = [list(map(int, g)) for g in groups]
        seen = sorted(j for g in self.groups for j in g)
        if seen != list(range(self.m)):
            raise StructureError("groups must partition the block indices")
        # scalar -> owning block, used for vectorized delayed reads
        self.owner = np.repeat(np.arange(self.m), sizes)

    def __repr__(self):
        return f"BlockLayout(m={self.m}, size={self.size})"

    def check_index(self, j):
        if not 0 <= j < self.m:
            raise StructureError(f"block index {j} out of range [0, {self.m})")

    def slice(self, j):
        self.check_index(j)
        return slice(int(self.offsets[j]), int(self.offsets[j + 1]))

    def view(self, x, j):
        return x[self.slice(j)]

    def check(self, x):
        """Validate that ``x`` is a flat vector conforming to the layout."""
        x = np.asarray(x)
        if x.ndim != 1 or x.size != self.size:
            raise StructureError(
                f"iterate has shape {x.shape}, expected ({self.size},)"
            )
        return x

    def split(self, x):
        x = self.check(x)
        return [x[self.slice(j)] for j in range(self.m)]

    def join(self, blocks):
        if len(blocks) != self.m:
            raise StructureError(f"expected {self.m} blocks, got {len(blocks)}")
        for j, b in enumerate(blocks):
            if np.size(b) != self.sizes[j]:
                raise StructureError(
                    f"block {j} has {np.size(b)} entries, expected {self.sizes[j]}"
                )
        return np.concatenate([np.ravel(b) for b in blocks]).astype(np.float64)


@dataclass
class LipschitzInfo:
    """Lipschitz constants of the partial gradients and of the full gradient.

    ``block`` holds ``L_j`` for every block; ``L`` bounds the full gradient.
    Both already include the safety factor ``rho``.
    """

    block: np.ndarray
    L: float
    rho: float = 1.0

    def __post_init__(self):
        self.block = np.asarray(self.block, dtype=np.float64)
        if np.any(~(self.block > 0)):
            raise ParameterError("block Lipschitz constants must be positive")
        if not self.L > 0:
            raise ParameterError("global Lipschitz constant must be positive")
        if self.rho < 1:
            raise ParameterError("safety factor rho must be >= 1")

    @property
    def L_min(self):
        return float(self.block.min())

    @property
    def L_max(self):
        return float(self.block.max())


class SmoothLoss:
    """Interface for the smooth part ``f``.

    Subclasses implement :meth:`value`, :meth:`partial_gradient` and
    :meth:`lipschitz`. The remaining methods have generic fallbacks.
    Implementations must be safe to call concurrently on distinct arrays.
    """

    layout: BlockLayout

    def value(self, x):
        raise NotImplementedError

    def partial_gradient(self, j, x):
        raise NotImplementedError

    def full_gradient(self, x):
        return np.concatenate(
            [self.partial_gradient(j, x) for j in range(self.layout.m)]
        )

    def stochastic_gradient(self, j, x, batch_size, rng):
        """Unbiased estimate of ``partial_gradient(j, x)`` from ``batch_size`` samples."""
        raise NotImplementedError(f"{type(self).__name__} has no stochastic oracle")

    def lipschitz(self, x):
        """Return a :class:`LipschitzInfo` valid near ``x``."""
        raise NotImplementedError

    def gradient_support(self, j):
        """Flat slices of ``x`` read by ``partial_gradient(j, .)``.

        The async engine refreshes only these from shared memory. The
        default is the whole vector.
        """
        return [slice(0, self.layout.size)]


class Regularizer:
    """Separable regularizer ``r_j`` with a fixed prox selection.

    ``prox(y, gamma)`` must return a deterministic element of
    ``argmin_x r(x) + ||x - y||^2 / (2 gamma)``. Values may be ``np.inf``.
    """

    def value(self, x):
        raise NotImplementedError

    def prox(self, y, gamma):
        raise NotImplementedError


@dataclass
class ProblemInstance:
    """``f(x) + sum_j r_j(x_j)`` on a fixed block layout."""

    layout: BlockLayout
    loss: SmoothLoss
    regs: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.regs = list(self.regs)
        if len(self.regs) != self.layout.m:
            raise StructureError(
                f"{len(self.regs)} regularizers for {self.layout.m} blocks"
            )
        # consecutive blocks sharing one regularizer object are evaluated as one slice
        runs = []
        for j, reg in enumerate(self.regs):
            if runs and runs[-1][2] is reg:
                runs[-1][1] = j + 1
            else:
                runs.append([j, j + 1, reg])
        self._block_runs = [(a, b, reg) for a, b, reg in runs]
        self._runs = [
            (int(self.layout.offsets[a]), int(self.layout.offsets[b]), reg)
            for a, b, reg in runs
        ]

    @property
    def m(self):
        return self.layout.m

    def reg_value(self, x):
        return float(sum(reg.value(x[a:b]) for a, b, reg in self._runs))

    def prox_all(self, y, gammas):
        """Blockwise prox of a full vector ``y`` with per-block stepsizes."""
        out = np.empty_like(y)
        off = self.layout.offsets
        gammas = np.asarray(gammas, dtype=np.float64)
        for a, b, reg in self._block_runs:
            # regularizers are entrywise: one call per stretch of equal stepsizes
            cuts = a + 1 + np.flatnonzero(np.diff(gammas[a:b]))
            bounds = [a, *cuts.tolist(), b]
            for s, e in zip(bounds[:-1], bounds[1:]):
                out[off[s]:off[e]] = reg.prox(y[off[s]:off[e]], float(gammas[s]))
        return out


def objective(problem, x):
    """``f(x) + r(x)``; ``inf`` when some ``r_j(x_j)`` is infinite."""
    x = problem.layout.check(x)
    r = problem.reg_value(x)
    if np.isinf(r):
        return float(r)
    return float(problem.loss.value(x)) + r


def partial_gradient(problem, j, x):
    """``grad_j f(x)`` as a flat block of length ``n_j``."""
    problem.layout.check_index(j)
    x = problem.layout.check(x)
    return problem.loss.partial_gradient(j, x)


def select_prox(problem, j, y, gamma):
    """The fixed prox selection ``zeta_j(y, gamma)``."""
    problem.layout.check_index(j)
    if not gamma > 0:
        raise ParameterError(f"prox stepsize must be positive, got {gamma}")
    y = np.asarray(y, dtype=np.float64)
    if y.size != problem.layout.sizes[j]:
        raise StructureError(
            f"block {j} has {problem.layout.sizes[j]} entries, got {y.size}"
        )
    return problem.regs[j].prox(y, gamma)
