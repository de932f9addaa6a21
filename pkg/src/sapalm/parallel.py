"""Lock-free multi-worker SAPALM on shared memory.

Workers are forked processes sharing the iterate through an anonymous
shared mapping. There are no locks on the hot path:

* iterate scalars are plain aligned float64 stores, so reads are torn-free
  per scalar but a block (or the whole vector) may mix versions;
* every counter has exactly one writer: ``totals[w]`` counts worker ``w``'s
  updates and ``counts[w, j]`` its updates of block ``j``. The global
  iteration ``k`` and the block versions are sums over workers.

A worker reads the gradient support from shared memory into a private
buffer, computes the (noisy) partial gradient, re-reads its own block at
write time as the prox anchor, and writes the result back scalar by
scalar. The observed delay of an update is the number of updates other
workers completed between its read and its write.

Checkpoints are taken by the worker whose update lands on a stride
multiple: it copies the live (inconsistent) iterate into a preallocated
slot. Metrics are evaluated after the join, so checkpoint values are
approximate under concurrency; with one worker they are exact.
"""

import logging
import math
import multiprocessing as mp
import os
import time
import traceback
from dataclasses import replace

import numpy as np

from .engine import (
    DELAY_HIST_CAP,
    BlockSelector,
    RunTrace,
    _check_start,
    checkpoint_metrics,
    prox_update,
    step_direction,
)
from .errors import ConfigError, DivergenceError, SapalmError
from .schedules import stepsize, worker_streams

log = logging.getLogger(__name__)

__all__ = ["run_async", "max_workers", "check_write_log", "MAX_WORKERS_ENV"]

MAX_WORKERS_ENV = "SAPALM_MAX_WORKERS"
_CKPT_BYTES_CAP = 1 << 30


def max_workers():
    """Worker cap from ``SAPALM_MAX_WORKERS`` (unset or empty means no cap)."""
    raw = os.environ.get(MAX_WORKERS_ENV, "").strip()
    if not raw:
        return None
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"not an integer: {raw!r}", MAX_WORKERS_ENV) from None
    if cap < 1:
        raise ConfigError("must be >= 1", MAX_WORKERS_ENV)
    return cap


def _shared(ctx, dtype, shape, fill=0):
    n = int(np.prod(shape))
    code = "d" if np.dtype(dtype) == np.float64 else "q"
    raw = ctx.RawArray(code, max(n, 1))
    arr = np.frombuffer(raw, dtype=dtype)[:n].reshape(shape)
    arr[...] = fill
    return arr


class _Shared:
    """All cross-process state, allocated before the fork."""

    def __init__(self, ctx, N, m, p, slots, tau):
        self.x = _shared(ctx, np.float64, (N,))
        self.totals = _shared(ctx, np.int64, (p,))
        self.counts = _shared(ctx, np.int64, (p, m))
        self.flags = _shared(ctx, np.int64, (3,))  # go, stop, error
        self.ready = _shared(ctx, np.int64, (p,))
        self.max_delay = _shared(ctx, np.int64, (p,))
        self.delay_hist = _shared(ctx, np.int64, (p, DELAY_HIST_CAP))
        self.t_start = _shared(ctx, np.float64, (1,))
        self.t_finish = _shared(ctx, np.float64, (p,))
        self.tau_ring = max(tau, 1)
        self.step_ring = _shared(ctx, np.float64, (self.tau_ring,))
        self.slots = slots
        self.ck_x = _shared(ctx, np.float64, (slots, N))
        self.ck_k = _shared(ctx, np.int64, (slots,), fill=-1)
        self.ck_t = _shared(ctx, np.float64, (slots,))
        self.ck_delay = _shared(ctx, np.int64, (slots,))
        self.ck_steps = _shared(ctx, np.float64, (slots, self.tau_ring))


def _limit_blas_threads():
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(1)
    except Exception:  # pragma: no cover - threadpoolctl missing or unsupported
        return None


def _worker(w, p, problem, cfg, sh, quota, stride, refresh, tau, results):
    _guard = _limit_blas_threads()
    lay = problem.layout
    loss = problem.loss
    pol, noise = cfg.policy, cfg.noise
    wlog = [] if cfg.record_log else None
    err = None
    try:
        sel_rng, noise_rng = worker_streams(cfg.seed, w)
        select = BlockSelector(lay, cfg.selection, sel_rng, worker=w, workers=p)
        local = np.array(sh.x)
        lip = loss.lipschitz(local)
        supports = {}
        totals, counts, x_sh = sh.totals, sh.counts, sh.x
        hist = sh.delay_hist[w]
        ring = sh.step_ring
        max_d = 0

        sh.ready[w] = 1
        while sh.flags[0] == 0:
            time.sleep(1e-4)
        t0 = sh.t_start[0]

        for i in range(quota):
            if sh.flags[1] or sh.flags[2]:
                break
            if cfg.time_budget is not None and time.perf_counter() - t0 > cfg.time_budget:
                sh.flags[1] = 1
                break
            if i > 0 and i % refresh == 0:
                local[:] = x_sh
                lip = loss.lipschitz(local)
            j = select()
            sup = supports.get(j)
            if sup is None:
                sup = supports[j] = loss.gradient_support(j)
            k_read = int(totals.sum())
            for s in sup:
                local[s] = x_sh[s]
            gamma = stepsize(pol, lip, j, k_read)
            g, _, _ = step_direction(problem, local, j, k_read, noise, noise_rng)
            sl = lay.slice(j)
            anchor = x_sh[sl].copy()  # freshest own-block value at write time
            new = prox_update(problem, j, anchor, g, gamma)
            if not np.all(np.isfinite(new)):
                sh.flags[2] = 1
                err = ("divergence", f"worker {w}: non-finite block {j} near iteration {k_read}", k_read, j)
                break
            x_sh[sl] = new
            k_write = int(totals.sum())
            d = k_write - k_read
            counts[w, j] += 1
            totals[w] += 1
            hist[min(d, DELAY_HIST_CAP - 1)] += 1
            if d > max_d:
                max_d = d
                sh.max_delay[w] = d
            diff = new - anchor
            ring[k_write % sh.tau_ring] = float(np.dot(diff, diff))
            if wlog is not None:
                wlog.append((k_write, j, new.copy(), time.perf_counter_ns()))
            k_now = k_write + 1
            if k_now % stride == 0:
                slot = k_now // stride
                if slot < sh.slots:
                    sh.ck_x[slot] = x_sh
                    sh.ck_steps[slot] = ring
                    sh.ck_delay[slot] = int(sh.max_delay.max())
                    sh.ck_t[slot] = time.perf_counter() - t0
                    sh.ck_k[slot] = k_now
    except Exception:
        sh.flags[2] = 1
        err = ("exception", traceback.format_exc(), None, None)
    finally:
        sh.t_finish[w] = time.perf_counter()
        results.put((w, err, wlog))
        results.close()
        results.join_thread()


def run_async(problem, x0, config):
    """Run ``config.workers`` lock-free workers until ``config.iterations`` total updates.

    Each worker performs an equal share of the updates. Raises
    :class:`DivergenceError` (with ``.trace`` holding the partial trace) if a
    worker produced non-finite values.
    """
    cfg = config if config.mode == "async" else replace(config, mode="async")
    cfg.validate(problem)
    lay = problem.layout
    m, N = lay.m, lay.size
    x = _check_start(problem, x0)
    warnings_ = []

    p = cfg.workers
    cap = max_workers()
    if cap is not None and p > cap:
        warnings_.append(f"workers capped from {p} to {cap} by {MAX_WORKERS_ENV}")
        log.warning(warnings_[-1])
        p = cap

    stride = cfg.resolved_stride(problem)
    refresh = cfg.resolved_refresh(problem)
    T = cfg.iterations
    if T is None:
        quotas = [2**62] * p
        slots = max(1, _CKPT_BYTES_CAP // (8 * N))
    else:
        quotas = [T // p + (1 if w < T % p else 0) for w in range(p)]
        slots = T // stride + 1
        if slots * N * 8 > _CKPT_BYTES_CAP:
            raise ConfigError(
                f"{slots} checkpoints of {N} floats exceed the snapshot budget; raise the stride",
                "stride",
            )
    tau = cfg.policy.tau

    ctx = mp.get_context("fork")
    sh = _Shared(ctx, N, m, p, slots, tau)
    sh.x[:] = x
    results = ctx.Queue()
    procs = [
        ctx.Process(
            target=_worker,
            args=(w, p, problem, cfg, sh, quotas[w], stride, refresh, tau, results),
            daemon=True,
        )
        for w in range(p)
    ]

    trace = RunTrace(
        meta={
            "mode": "async", "workers": p, "selection": cfg.selection, "m": m,
            "stride": stride, "lipschitz_refresh": refresh,
            "worker_blocks": _assignment(lay, cfg, p),
            "checkpoints": "approximate under concurrency" if p > 1 else "exact",
        },
        approximate=p > 1,
    )
    init = checkpoint_metrics(problem, cfg, x, 0, [], 0, 0.0)

    for proc in procs:
        proc.start()
    try:
        while sh.ready.sum() < p:
            if not any(proc.is_alive() for proc in procs):
                break
            time.sleep(1e-4)
        sh.t_start[0] = time.perf_counter()
        sh.flags[0] = 1
        outcomes = [results.get() for _ in range(p)]
    finally:
        for proc in procs:
            proc.join(timeout=60)
            if proc.is_alive():  # pragma: no cover
                proc.kill()
    elapsed = float(sh.t_finish.max() - sh.t_start[0])

    x_final = np.array(sh.x)
    k_final = int(sh.totals.sum())
    hist = sh.delay_hist.sum(axis=0)
    max_delay = int(sh.max_delay.max())
    if max_delay > tau:
        warnings_.append(
            f"observed delay {max_delay} exceeds configured tau={tau}; bounded-delay assumption violated"
        )
        log.warning(warnings_[-1])

    trace.records.append(init)
    last_k = 0
    for slot in range(1, sh.slots):
        k = int(sh.ck_k[slot])
        if k <= last_k:
            continue
        steps = _ordered_steps(sh.ck_steps[slot], k, sh.tau_ring)
        rec = checkpoint_metrics(problem, cfg, np.array(sh.ck_x[slot]), k, steps,
                                 int(sh.ck_delay[slot]), float(sh.ck_t[slot]))
        trace.records.append(rec)
        last_k = k
    if k_final > last_k:
        steps = _ordered_steps(np.array(sh.step_ring), k_final, sh.tau_ring)
        trace.records.append(checkpoint_metrics(problem, cfg, x_final, k_final, steps, max_delay, elapsed))

    nz = np.nonzero(hist)[0]
    trace.delay_hist = hist[: (nz.max() + 1 if nz.size else 1)].copy()
    trace.block_versions = sh.counts.sum(axis=0).copy()
    trace.x_final = x_final
    trace.warnings = warnings_
    trace.summary = {
        "total_updates": k_final,
        "elapsed_s": elapsed,
        "updates_per_s": k_final / elapsed if elapsed > 0 else math.inf,
        "max_delay": max_delay,
        "configured_tau": tau,
        "per_worker_updates": sh.totals.tolist(),
    }
    if cfg.record_log:
        logs = {w: wl for w, _, wl in outcomes}
        trace.write_log = [logs[w] for w in range(p)]

    failures = [(w, e) for w, e, _ in outcomes if e is not None]
    if failures:
        w, (kind, msg, k, j) = failures[0]
        exc = DivergenceError(msg, k=k, block=j) if kind == "divergence" else SapalmError(msg)
        exc.trace = trace
        raise exc
    return trace


def _ordered_steps(ring, k, size):
    """Newest-first squared step lengths before iteration ``k`` from the shared ring."""
    return [float(ring[(k - h) % size]) for h in range(1, min(k, size) + 1)]


def _assignment(layout, cfg, p):
    if cfg.selection == "uniform":
        return "all workers draw uniformly from all blocks"
    groups = layout.groups
    G = len(groups)
    out = {}
    for w in range(p):
        owned = [w % G] if p >= G else list(range(w, G, p))
        out[w] = owned
    return out


def check_write_log(problem, x0, x_final, write_log):
    """No-lost-blocks check for a ``record_log`` async run.

    Every scalar of the final iterate must equal the value some worker wrote
    to it in that worker's last write of the owning block, or the initial
    value if the block was never written.
    """
    lay = problem.layout
    last = {}
    for wl in write_log:
        mine = {}
        for _, j, vals, _ in wl:
            mine[j] = vals
        for j, vals in mine.items():
            last.setdefault(j, []).append(vals)
    for j in range(lay.m):
        sl = lay.slice(j)
        cands = last.get(j)
        if cands is None:
            if not np.array_equal(x_final[sl], np.asarray(x0)[sl]):
                return False
            continue
        stack = np.stack(cands)
        if not np.all(np.any(stack == x_final[sl], axis=0)):
            return False
    return True
