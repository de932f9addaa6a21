"""Single-threaded SAPALM engines and the pieces shared with the parallel one.

``run_sync`` is PALM with randomized (or cyclic) block selection and no
delays. ``run_sim_async`` replays the global view of the asynchronous
method literally: at iteration ``k`` block ``i`` of the gradient read comes
from ``x^{k - d_{k,i}}`` (``x^l = x^0`` for ``l < 0``) while the prox is
anchored at the current ``x_j^k``. Both are deterministic given the seed.
"""

import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .diagnostics import lyapunov_from_steps, stationarity
from .errors import ConfigError, DivergenceError, ParameterError, StructureError
from .model import objective
from .schedules import (
    NoiseModel,
    StepsizePolicy,
    minibatch_schedule,
    sample_noise,
    stepsize,
    stepsizes,
    weight_c,
    worker_streams,
)

log = logging.getLogger(__name__)

__all__ = [
    "MODES",
    "SELECTIONS",
    "DELAY_KINDS",
    "DelaySchedule",
    "RunConfig",
    "Checkpoint",
    "RunTrace",
    "BlockSelector",
    "step_direction",
    "prox_update",
    "sapalm_step",
    "run_sync",
    "run_sim_async",
    "run",
]

MODES = ("sync", "sim-async", "async")
SELECTIONS = ("uniform", "dedicated-cyclic")
DELAY_KINDS = ("constant", "uniform", "lagged-block")
DELAY_HIST_CAP = 4096


@dataclass(frozen=True)
class DelaySchedule:
    """Per-iteration read delays ``d_{k,i} in {0..tau}`` for the simulated engine.

    ``constant``      every block is ``delay`` iterations stale (default ``tau``)
    ``uniform``       iid uniform on ``{0..tau}`` per block and iteration
    ``lagged-block``  block ``block`` is ``tau`` stale, all others current
    """

    kind: str = "constant"
    tau: int = 0
    delay: int = None
    block: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ParameterError(f"unknown delay schedule {self.kind!r}; choose from {DELAY_KINDS}")
        if self.tau < 0:
            raise ParameterError(f"tau must be >= 0, got {self.tau}")
        if self.delay is not None and not 0 <= self.delay <= self.tau:
            raise ParameterError(f"constant delay {self.delay} outside [0, {self.tau}]")

    def rng(self):
        return np.random.default_rng([int(self.seed), 7])

    def delays(self, k, m, rng):
        if self.kind == "constant":
            d = self.tau if self.delay is None else self.delay
            return np.full(m, d, dtype=np.int64)
        if self.kind == "uniform":
            return rng.integers(0, self.tau + 1, m)
        out = np.zeros(m, dtype=np.int64)
        out[self.block % m] = self.tau
        return out


@dataclass
class RunConfig:
    mode: str = "sync"
    iterations: int = 0
    workers: int = 1
    selection: str = "uniform"
    time_budget: float = None
    stride: int = None
    seed: int = 0
    policy: StepsizePolicy = field(default_factory=StepsizePolicy)
    noise: NoiseModel = field(default_factory=NoiseModel)
    delay: DelaySchedule = None
    lipschitz_refresh: int = None
    record_log: bool = False
    track_lyapunov: bool = False
    faithful_stationarity: bool = False

    def validate(self, problem):
        m = problem.m
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}", "mode")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection {self.selection!r}; choose from {SELECTIONS}", "selection")
        if self.iterations is None and self.time_budget is None:
            raise ConfigError("need an iteration count or a time budget", "iterations")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("must be >= 0", "iterations")
        if self.workers < 1:
            raise ConfigError("must be >= 1", "workers")
        if self.mode != "async" and self.workers != 1:
            raise ConfigError(f"{self.mode} mode runs exactly one worker", "workers")
        if self.policy.m != m:
            raise ConfigError(f"policy has m={self.policy.m}, problem has m={m}", "policy")
        if self.mode == "sim-async":
            if self.delay is None:
                raise ConfigError("sim-async needs a delay schedule", "delay")
            if self.delay.tau > self.policy.tau:
                raise ConfigError(
                    f"schedule delays up to {self.delay.tau} exceed the stepsize tau={self.policy.tau}",
                    "tau",
                )
        if self.stride is not None and self.stride < 1:
            raise ConfigError("must be >= 1", "stride")
        if self.lipschitz_refresh is not None and self.lipschitz_refresh < 1:
            raise ConfigError("must be >= 1", "lipschitz_refresh")

    def resolved_stride(self, problem):
        return self.stride or problem.m

    def resolved_refresh(self, problem):
        if self.lipschitz_refresh:
            return self.lipschitz_refresh
        hook = getattr(problem.loss, "refresh_interval", None)
        return hook() if hook else problem.m


@dataclass
class Checkpoint:
    k: int
    epoch: float
    wall_time_s: float
    objective: float
    stationarity: float
    lyapunov: float
    max_delay: int
    c_k: float
    gamma_min: float
    gamma_max: float
    batch_size: int = 0

    # fields that must agree bitwise between equivalent deterministic runs
    K_FIELDS = ("k", "epoch", "objective", "stationarity", "lyapunov",
                "max_delay", "c_k", "gamma_min", "gamma_max", "batch_size")

    def k_indexed(self):
        return tuple(getattr(self, f) for f in self.K_FIELDS)


CHECKPOINT_COLUMNS = tuple(f.name for f in fields(Checkpoint))


@dataclass
class RunTrace:
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    delay_hist: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    warnings: list = field(default_factory=list)
    x_final: np.ndarray = None
    lyapunov_increments: list = None
    faithful_stationarity: list = None
    write_log: list = None
    block_versions: np.ndarray = None
    approximate: bool = False

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    def k_indexed(self):
        return [r.k_indexed() for r in self.records]

    def rows(self):
        return [asdict(r) for r in self.records]


class BlockSelector:
    """Block choice for one worker.

    ``uniform`` draws iid uniform blocks. ``dedicated-cyclic`` gives worker
    ``w`` of ``p`` its share of the layout's groups and sweeps each owned
    group in order starting from a random member, restarting at a fresh
    random member after every full cycle.
    """

    def __init__(self, layout, selection, rng, worker=0, workers=1):
        self.m = layout.m
        self.selection = selection
        self.rng = rng
        if selection == "dedicated-cyclic":
            groups = layout.groups
            G = len(groups)
            self.owned = [groups[worker % G]] if workers >= G else groups[worker::workers]
            self._queue = deque()
        elif selection != "uniform":
            raise ParameterError(f"unknown selection {selection!r}")

    @property
    def owned_blocks(self):
        if self.selection == "uniform":
            return list(range(self.m))
        return sorted(j for g in self.owned for j in g)

    def __call__(self):
        if self.selection == "uniform":
            return int(self.rng.integers(0, self.m))
        if not self._queue:
            for g in self.owned:
                s = int(self.rng.integers(0, len(g)))
                self._queue.extend(g[s:])
                self._queue.extend(g[:s])
        return self._queue.popleft()


def step_direction(problem, x_read, j, k, noise, rng):
    """``g = grad_j f(x_read) + nu_j^k``, or a minibatch estimate of the gradient.

    Returns ``(g, nu, batch_size)``; ``nu`` is the injected Gaussian noise
    (zeros for minibatch or noiseless runs).
    """
    n_j = int(problem.layout.sizes[j])
    if noise.kind == "minibatch":
        b = minibatch_schedule(k, noise.alpha, noise.batch_base)
        return problem.loss.stochastic_gradient(j, x_read, b, rng), np.zeros(n_j), b
    g = problem.loss.partial_gradient(j, x_read)
    nu = sample_noise(noise, k, j, n_j, rng)
    if noise.is_gaussian:
        g = g + nu
    return g, nu, 0


def prox_update(problem, j, anchor, g, gamma):
    """``zeta_j(anchor - gamma g, gamma)``."""
    return problem.regs[j].prox(anchor - gamma * g, gamma)


def sapalm_step(problem, x_read, j, k, policy, lipschitz, noise, rng, anchor=None):
    """One block update: prox-gradient step on block ``j`` from the read ``x_read``.

    ``anchor`` is the block value the prox is centred on; it defaults to
    block ``j`` of ``x_read`` (the synchronous case).
    """
    if anchor is None:
        anchor = problem.layout.view(x_read, j)
    gamma = stepsize(policy, lipschitz, j, k)
    g, _, _ = step_direction(problem, x_read, j, k, noise, rng)
    new = prox_update(problem, j, anchor, g, gamma)
    if not np.all(np.isfinite(new)):
        raise DivergenceError(f"non-finite block {j} at iteration {k}", k=k, block=j)
    return new


def _check_start(problem, x0):
    x = np.array(problem.layout.check(x0), dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise StructureError("initial iterate has non-finite entries")
    F = objective(problem, x)
    if not np.isfinite(F):
        raise StructureError("objective is not finite at the initial iterate")
    return x


def checkpoint_metrics(problem, cfg, x, k, steps, max_delay, wall):
    """Checkpoint record at iterate ``x``; Lipschitz constants are re-estimated at ``x``."""
    pol = cfg.policy
    F = objective(problem, x)
    lip = problem.loss.lipschitz(x)
    gam = stepsizes(pol, lip, k)
    S = stationarity(problem, x, gam).value
    Phi = lyapunov_from_steps(F, list(steps)[: pol.tau], lip.L, problem.m, pol.tau)
    b = minibatch_schedule(k, cfg.noise.alpha, cfg.noise.batch_base) if cfg.noise.kind == "minibatch" else 0
    return Checkpoint(
        k=int(k),
        epoch=k / problem.m,
        wall_time_s=wall,
        objective=F,
        stationarity=S,
        lyapunov=Phi,
        max_delay=int(max_delay),
        c_k=weight_c(k, pol.regime, pol.alpha),
        gamma_min=float(gam.min()),
        gamma_max=float(gam.max()),
        batch_size=int(b),
    )


def _run_serial(problem, x0, cfg, delayed):
    cfg.validate(problem)
    lay = problem.layout
    m, N = lay.m, lay.size
    pol, noise = cfg.policy, cfg.noise
    x = _check_start(problem, x0)
    sel_rng, noise_rng = worker_streams(cfg.seed, 0)
    select = BlockSelector(lay, cfg.selection, sel_rng)
    stride = cfg.resolved_stride(problem)
    refresh = cfg.resolved_refresh(problem)
    T = cfg.iterations if cfg.iterations is not None else math.inf

    lip = problem.loss.lipschitz(x)
    # newest-first squared step lengths, enough for the Lyapunov history term
    steps = deque(maxlen=max(pol.tau, 1))
    delay_hist = np.zeros(DELAY_HIST_CAP, dtype=np.int64)
    versions = np.zeros(m, dtype=np.int64)
    max_delay = 0

    if delayed:
        sched = cfg.delay
        dtau = sched.tau
        drng = sched.rng()
        hist = np.empty((dtau + 1, N))
        hist[:] = x
        cols = np.arange(N)

    trace = RunTrace(meta={"mode": cfg.mode, "workers": 1, "selection": cfg.selection,
                           "m": m, "stride": stride, "lipschitz_refresh": refresh})
    trace.lyapunov_increments = [] if cfg.track_lyapunov else None
    trace.faithful_stationarity = [] if (cfg.faithful_stationarity and delayed) else None
    # separate stream so the probe does not perturb the run itself
    probe_rng = np.random.default_rng([int(cfg.seed), 11])
    trace.write_log = [] if cfg.record_log else None

    t0 = time.perf_counter()
    trace.records.append(checkpoint_metrics(problem, cfg, x, 0, steps, 0, 0.0))
    F_cur = objective(problem, x) if cfg.track_lyapunov else None

    k = 0
    try:
        while k < T:
            if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
                break
            if k > 0 and k % refresh == 0:
                lip = problem.loss.lipschitz(x)
            j = select()
            sl = lay.slice(j)
            if delayed:
                d = sched.delays(k, m, drng)
                dk = int(d.max())
                slots = np.maximum(k - d, 0) % (dtau + 1)
                x_read = hist[slots[lay.owner], cols]
            else:
                dk = 0
                x_read = x
            delay_hist[min(dk, DELAY_HIST_CAP - 1)] += 1
            max_delay = max(max_delay, dk)

            gamma = stepsize(pol, lip, j, k)
            g, nu, _ = step_direction(problem, x_read, j, k, noise, noise_rng)
            old = x[sl].copy()
            new = prox_update(problem, j, old, g, gamma)
            if not np.all(np.isfinite(new)):
                raise DivergenceError(f"non-finite block {j} at iteration {k}", k=k, block=j)

            if trace.faithful_stationarity is not None and k % stride == 0:
                trace.faithful_stationarity.append(
                    (k, _faithful_stationarity(problem, x, x_read, k, pol, lip, noise, probe_rng))
                )

            s = float(np.dot(new - old, new - old))
            x[sl] = new
            versions[j] += 1
            if cfg.track_lyapunov:
                F_next = objective(problem, x)
                prev = list(steps)[: pol.tau]
                phi_k = lyapunov_from_steps(F_cur, prev, lip.L, m, pol.tau)
                phi_next = lyapunov_from_steps(F_next, ([s] + prev)[: pol.tau], lip.L, m, pol.tau)
                trace.lyapunov_increments.append(phi_next - phi_k)
                F_cur = F_next
            steps.appendleft(s)
            if delayed:
                hist[(k + 1) % (dtau + 1)] = x
            if trace.write_log is not None:
                trace.write_log.append((k, j, new.copy()))
            k += 1
            if k % stride == 0 or k == T:
                trace.records.append(
                    checkpoint_metrics(problem, cfg, x, k, steps, max_delay, time.perf_counter() - t0)
                )
    except DivergenceError as exc:
        exc.trace = _finish(trace, x, k, t0, delay_hist, max_delay, versions)
        raise
    return _finish(trace, x, k, t0, delay_hist, max_delay, versions)


def _faithful_stationarity(problem, x, x_read, k, pol, lip, noise, rng):
    """Stationarity at ``x^k`` with the delayed read and a fresh noise draw for every block."""
    lay = problem.layout
    gam = stepsizes(pol, lip, k)
    if noise.kind == "minibatch":
        b = minibatch_schedule(k, noise.alpha, noise.batch_base)
        g = np.concatenate([problem.loss.stochastic_gradient(j, x_read, b, rng) for j in range(lay.m)])
        return stationarity(problem, x, gam, grad=g).value
    g = problem.loss.full_gradient(x_read)
    nu = np.concatenate([sample_noise(noise, k, j, int(lay.sizes[j]), rng) for j in range(lay.m)])
    return stationarity(problem, x, gam, grad=g, noise=nu).value


def _finish(trace, x, k, t0, delay_hist, max_delay, versions):
    elapsed = time.perf_counter() - t0
    trace.x_final = x
    nz = np.nonzero(delay_hist)[0]
    trace.delay_hist = delay_hist[: (nz.max() + 1 if nz.size else 1)].copy()
    trace.block_versions = versions
    trace.summary = {
        "total_updates": int(k),
        "elapsed_s": elapsed,
        "updates_per_s": k / elapsed if elapsed > 0 else math.inf,
        "max_delay": int(max_delay),
    }
    return trace


def run_sync(problem, x0, config):
    """Synchronous PALM: one block update per iteration, all reads current."""
    if config.mode != "sync":
        config = replace(config, mode="sync")
    return _run_serial(problem, x0, config, delayed=False)


def run_sim_async(problem, x0, config):
    """Deterministic replay of the asynchronous method under an explicit delay schedule."""
    if config.mode != "sim-async":
        config = replace(config, mode="sim-async")
    return _run_serial(problem, x0, config, delayed=True)


def run(problem, x0, config):
    """Dispatch on ``config.mode``."""
    if config.mode == "sync":
        return run_sync(problem, x0, config)
    if config.mode == "sim-async":
        return run_sim_async(problem, x0, config)
    if config.mode == "async":
        from .parallel import run_async

        return run_async(problem, x0, config)
    raise ConfigError(f"unknown mode {config.mode!r}", "mode")
