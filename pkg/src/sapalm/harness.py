"""Experiment runner, speedup tables and desk-scale verification suites.

Trace CSV schema (one row per checkpoint, ``k`` strictly increasing)::

    k, epoch, wall_time_s, objective, stationarity, lyapunov, max_delay, c_k,
    gamma_min, gamma_max, batch_size

Floats are written with ``repr`` so they round-trip exactly. A run that
aborts keeps the rows recorded so far and ends with a comment line
``# error: <type>: <message>``; :func:`read_trace` skips comment lines.
"""

import csv
import logging
import math
import os
import platform
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, load_config
from .diagnostics import fit_rate_slope, running_min
from .engine import CHECKPOINT_COLUMNS, DelaySchedule, RunConfig, run
from .errors import ConfigError, SapalmError
from .problems import (
    generate_data,
    init_state,
    load_data,
    save_data,
    spca_instance,
    firm_pca_instance,
)
from .prox import FirmReg, L1Reg, QuadraticReg, ZeroReg
from .schedules import NoiseModel, StepsizePolicy

log = logging.getLogger(__name__)

__all__ = [
    "TRACE_COLUMNS",
    "REFERENCE_TIMING",
    "REFERENCE_SPEEDUP",
    "SUITES",
    "RunArtifacts",
    "SpeedupReport",
    "CheckResult",
    "prepare",
    "run_experiment",
    "write_trace",
    "read_trace",
    "speedup_table",
    "verify_suite",
]

TRACE_COLUMNS = CHECKPOINT_COLUMNS

# Sparse PCA, n = 2000, 16 epochs, published reference (seconds / speedup)
REFERENCE_TIMING = {
    (10, 1): 65.9972, (10, 2): 33.464, (10, 4): 17.5415, (10, 8): 9.2376, (10, 16): 4.934,
    (20, 1): 253.387, (20, 2): 127.8973, (20, 4): 67.3267, (20, 8): 34.5614, (20, 16): 17.4362,
    (100, 1): 6144.9427, (100, 8): 833.5635, (100, 16): 416.8038,
}
REFERENCE_SPEEDUP = {
    (10, 1): 1.0, (10, 2): 1.9722, (10, 4): 3.7623, (10, 8): 7.1444, (10, 16): 13.376,
    (20, 1): 1.0, (20, 2): 1.9812, (20, 4): 3.7635, (20, 8): 7.3315, (20, 16): 14.5322,
    (100, 1): 1.0, (100, 8): 7.3719, (100, 16): 14.743,
}


# -- single runs -------------------------------------------------------------


def prepare(cfg):
    """Data, problem instance and starting point for a resolved config."""
    if cfg.data_file:
        try:
            data = load_data(cfg.data_file)
        except OSError as exc:
            raise ConfigError(f"cannot read data file: {exc}", "data_file") from None
        if data.n != cfg.n:
            raise ConfigError(f"data file holds n={data.n} but config says n={cfg.n}", "n")
    else:
        data = generate_data(cfg.n, cfg.data_seed)
    problem = cfg.build_problem(data)
    x0 = init_state(cfg.n, cfg.d, cfg.seed).to_flat()
    return data, problem, x0


def write_trace(path, records, wall_clock=True, error=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for rec in records:
            row = []
            for name in TRACE_COLUMNS:
                v = getattr(rec, name)
                if name == "wall_time_s" and not wall_clock:
                    v = 0.0
                row.append(repr(float(v)) if isinstance(v, float) else str(v))
            w.writerow(row)
        if error is not None:
            fh.write(f"# error: {type(error).__name__}: {str(error).splitlines()[0] if str(error) else ''}\n")


def read_trace(path):
    """Trace CSV as a dict of numpy columns; comment lines are skipped."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    header, body = rows[0], rows[1:]
    cols = {}
    for i, name in enumerate(header):
        vals = [r[i] for r in body]
        if name in ("k", "max_delay", "batch_size"):
            cols[name] = np.array([int(v) for v in vals], dtype=np.int64)
        else:
            cols[name] = np.array([float(v) for v in vals], dtype=np.float64)
    return cols


@dataclass
class RunArtifacts:
    out: str
    trace_path: str
    metadata_path: str
    data_path: str = None
    trace: object = None
    status: str = "ok"


def _metadata(cfg, trace, status, error=None):
    meta = {
        "status": status,
        "library": {"name": "sapalm", "version": __version__},
        "python": platform.python_version(),
        "numpy": np.__version__,
        "config": cfg.to_dict(),
        "csv_columns": list(TRACE_COLUMNS),
    }
    if trace is not None:
        meta["observed_tau"] = int(trace.summary.get("max_delay", 0))
        meta["configured_tau"] = int(cfg.tau)
        meta["delay_histogram"] = {int(d): int(c) for d, c in enumerate(trace.delay_hist) if c}
        meta["summary"] = {k: (v if not isinstance(v, float) else float(v)) for k, v in trace.summary.items()}
        meta["engine"] = {k: v for k, v in trace.meta.items()}
        if trace.warnings:
            meta["warnings"] = list(trace.warnings)
    if error is not None:
        meta["error"] = f"{type(error).__name__}: {error}"
    return meta


def run_experiment(config, out=None):
    """Run one configured experiment and write its artifacts.

    ``config`` is an :class:`ExperimentConfig` or a path to a YAML file.
    Writes ``trace.csv``, ``metadata.yaml`` and, when ``save_data`` is set,
    ``data.splm`` under ``out`` (default ``config.out``). On an engine
    failure the partial trace is flushed with an error marker and the
    exception is re-raised.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    if out is not None:
        cfg = replace(cfg, out=str(out))
    os.makedirs(cfg.out, exist_ok=True)
    art = RunArtifacts(
        out=cfg.out,
        trace_path=os.path.join(cfg.out, "trace.csv"),
        metadata_path=os.path.join(cfg.out, "metadata.yaml"),
    )
    data, problem, x0 = prepare(cfg)
    if cfg.save_data:
        art.data_path = os.path.join(cfg.out, "data.splm")
        save_data(data, art.data_path)
    rc = cfg.run_config(problem)

    trace, error = None, None
    try:
        trace = run(problem, x0, rc)
    except SapalmError as exc:
        error = exc
        trace = getattr(exc, "trace", None)
    records = trace.records if trace is not None else []
    write_trace(art.trace_path, records, cfg.wall_clock, error)
    status = "ok" if error is None else "error"
    with open(art.metadata_path, "w") as fh:
        yaml.safe_dump(_metadata(cfg, trace, status, error), fh, sort_keys=False)
    art.trace, art.status = trace, status
    if error is not None:
        raise error
    return art


# -- speedup -----------------------------------------------------------------


@dataclass
class SpeedupReport:
    """``T_k(p)`` (seconds for ``k`` epochs) and ``speedup = T_k(1) / T_k(p)`` per ``(d, p)``."""

    epochs: float
    rows: list = field(default_factory=list)
    complete: bool = True

    def speedup(self, d, p):
        for r in self.rows:
            if r["d"] == d and r["p"] == p:
                return r["speedup"]
        raise KeyError((d, p))

    def to_text(self):
        head = ["d", "p", "time_s", "speedup", "ref_time_s", "ref_speedup"]
        lines = [[str(r[h]) if not isinstance(r[h], float) else f"{r[h]:.4f}" for h in head] for r in self.rows]
        lines = [["-" if c == "None" else c for c in row] for row in lines]
        widths = [max(len(h), *(len(row[i]) for row in lines)) if lines else len(h) for i, h in enumerate(head)]
        fmt = lambda row: "  ".join(c.rjust(wd) for c, wd in zip(row, widths))  # noqa: E731
        out = [f"speedup for {self.epochs:g} epochs (speedup = T(1) / T(p))", fmt(head)]
        out += [fmt(row) for row in lines]
        if not self.complete:
            out.append("(incomplete: a run failed)")
        return "\n".join(out) + "\n"

    def write(self, out):
        os.makedirs(out, exist_ok=True)
        cols = ["d", "p", "time_s", "speedup", "repeats", "ref_time_s", "ref_speedup"]
        with open(os.path.join(out, "speedup.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.rows:
                w.writerow(["" if r[c] is None else (";".join(map(repr, r[c])) if c == "repeats" else r[c]) for c in cols])
        with open(os.path.join(out, "speedup.txt"), "w") as fh:
            fh.write(self.to_text())


def _time_once(problem, x0, rc):
    trace = run(problem, x0, rc)
    return float(trace.summary["elapsed_s"])


def speedup_table(base, threads=(1, 2, 4), ds=None, epochs=16, repeats=3, warmup=True, out=None):
    """Time async runs for every ``(d, p)`` and report speedups relative to ``p = 1``.

    Each timing is the median of ``repeats`` runs after one discarded
    warm-up run. Only the engine's worker loop is timed; data generation,
    checkpoint metrics and output writing are excluded. If a run fails the
    partial table is written (when ``out`` is given) and the error re-raised.
    """
    threads = sorted(set(int(p) for p in threads) | {1})
    ds = [base.d] if ds is None else list(ds)
    report = SpeedupReport(epochs=epochs)
    try:
        for d in ds:
            cfg = replace(base, d=d, mode="async", workers=1, epochs=epochs, iterations=None)
            data, problem, x0 = prepare(cfg)
            T = cfg.total_iterations(problem.m)
            times = {}
            for p in threads:
                rc = replace(cfg.run_config(problem), workers=p, stride=max(T, 1))
                if warmup:
                    _time_once(problem, x0, rc)
                reps = [_time_once(problem, x0, rc) for _ in range(repeats)]
                times[p] = statistics.median(reps)
                report.rows.append({
                    "d": d, "p": p, "time_s": times[p],
                    "speedup": 1.0 if p == 1 else times[1] / times[p],
                    "repeats": reps,
                    "ref_time_s": REFERENCE_TIMING.get((d, p)),
                    "ref_speedup": REFERENCE_SPEEDUP.get((d, p)),
                })
                log.info("d=%d p=%d median %.3fs", d, p, times[p])
    except SapalmError:
        report.complete = False
        if out is not None:
            report.write(out)
        raise
    if out is not None:
        report.write(out)
    return report


# -- verification suites -----------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    threshold: float
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"[{tag}] {self.name}: measured {self.measured:.6g} (threshold {self.threshold:g}) {self.detail}".rstrip()


def grid_argmin(fun, lo=-10.0, hi=10.0, step=1e-4):
    """Grid minimum of a scalar function, refined once on a finer grid around the best point."""
    xs = np.arange(lo, hi + step / 2, step)
    i = int(np.argmin(fun(xs)))
    fine = np.linspace(xs[i] - step, xs[i] + step, 2001)
    vals = fun(fine)
    i = int(np.argmin(vals))
    return float(fine[i]), float(vals[i])


def _random_reg(kind, rng):
    if kind == "zero":
        return ZeroReg()
    if kind == "l1":
        return L1Reg(rng.uniform(0.0, 3.0))
    lam = rng.uniform(0.0, 2.0)
    firm = FirmReg(lam, lam + rng.uniform(0.5, 5.0))
    return firm if kind == "firm" else QuadraticReg(firm, rng.uniform(0.0, 2.0))


def _entrywise_value(reg, xs):
    if isinstance(reg, ZeroReg):
        return np.zeros_like(xs)
    if isinstance(reg, L1Reg):
        return reg.lam * np.abs(xs)
    if isinstance(reg, FirmReg):
        a = np.abs(xs)
        return reg.lam * np.where(a <= reg.kappa, a - a * a / (2 * reg.kappa), reg.kappa / 2)
    return _entrywise_value(reg.base, xs) + 0.5 * reg.mu * xs * xs


def _suite_prox(seed=0):
    rng = np.random.default_rng(seed)
    worst, fails, total = 0.0, 0, 0
    for kind in ("l1", "firm", "firm+quadratic", "zero"):
        for _ in range(25):
            reg = _random_reg(kind, rng)
            y = rng.uniform(-8.0, 8.0)
            gamma = rng.uniform(0.05, 1.0)
            if isinstance(reg, (FirmReg, QuadraticReg)):
                base = reg if isinstance(reg, FirmReg) else reg.base
                gamma = min(gamma, 0.9 * base.kappa / max(base.lam, 1e-12))
            fun = lambda xs: _entrywise_value(reg, xs) + (xs - y) ** 2 / (2 * gamma)  # noqa: E731
            x = float(reg.prox(np.array([y]), gamma)[0])
            _, best = grid_argmin(fun)
            gap = float(fun(np.array([x]))[0] - best)
            worst = max(worst, gap)
            fails += gap > 1e-8
            total += 1
    return [CheckResult("prox-oracle", fails == 0, worst, 1e-8, f"{total - fails}/{total} cases")]


def _fd_check(problem, x, eps=1e-6):
    g = problem.loss.full_gradient(x)
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        fd[i] = (problem.loss.value(x + e) - problem.loss.value(x - e)) / (2 * eps)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))


def _suite_gradient(seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for name in ("spca", "firm-pca"):
        worst = 0.0
        for t in range(20):
            n, d = int(rng.integers(2, 21)), int(rng.integers(1, 4))
            data = generate_data(n, seed * 100 + t)
            layout = "factor" if t % 2 else "column"
            if name == "spca":
                prob = spca_instance(data, d, 0.5, layout)
            else:
                prob = firm_pca_instance(data, d, 0.5, 2.5, 0.1, layout)
            x = rng.standard_normal(prob.layout.size)
            worst = max(worst, _fd_check(prob, x))
        out.append(CheckResult(f"gradient-fd {name}", worst < 1e-5, worst, 1e-5))
    return out


def _spca(n, d, lam=0.5, layout="factor", seed=0):
    prob = spca_instance(generate_data(n, seed), d, lam, layout)
    return prob, init_state(n, d, seed).to_flat()


def _suite_equivalence():
    prob, x0 = _spca(100, 3)
    m = prob.m
    worst = 0
    for seed in range(3):
        base = RunConfig(iterations=10 * m, seed=seed, policy=StepsizePolicy(m=m))
        a = run(prob, x0, replace(base, mode="sync"))
        b = run(prob, x0, replace(base, mode="sim-async", delay=DelaySchedule("constant", 0)))
        c = run(prob, x0, replace(base, mode="async", workers=1))
        same = a.k_indexed() == b.k_indexed() == c.k_indexed()
        same = same and np.array_equal(a.x_final, b.x_final) and np.array_equal(a.x_final, c.x_final)
        worst += not same
    return [CheckResult("engine-equivalence", worst == 0, worst, 0, "mismatching seeds")]


def _suite_lyapunov(seeds=50, epochs=20, tau=5):
    prob, x0 = _spca(100, 3)
    m = prob.m
    incs = []
    for s in range(seeds):
        rc = RunConfig(mode="sim-async", iterations=epochs * m, seed=s,
                       policy=StepsizePolicy(tau=tau, m=m), delay=DelaySchedule("uniform", tau, seed=s),
                       track_lyapunov=True)
        incs.append(run(prob, x0, rc).lyapunov_increments)
    inc = np.asarray(incs)
    mean = inc.mean(axis=0)
    se = inc.std(axis=0, ddof=1) / math.sqrt(seeds)
    excess = float(np.max(mean - 2 * se))
    return [CheckResult("lyapunov-supermartingale", excess <= 0, excess, 0.0, "max over k of mean - 2 se")]


def _suite_rate():
    prob, x0 = _spca(500, 5)
    m = prob.m
    rc = RunConfig(mode="sim-async", iterations=200 * m, seed=0, policy=StepsizePolicy(tau=3, m=m),
                   delay=DelaySchedule("uniform", 3, seed=0))
    tr = run(prob, x0, rc)
    slope = fit_rate_slope(tr.column("k"), tr.column("stationarity"))
    return [CheckResult("rate-slope summable", slope <= -0.8, slope, -0.8)]


def _suite_noise():
    out = []
    prob, x0 = _spca(500, 5)
    m = prob.m
    rc = RunConfig(mode="sim-async", iterations=200 * m, seed=0,
                   policy=StepsizePolicy(regime="alpha-diminishing", alpha=0.5, tau=3, m=m),
                   delay=DelaySchedule("uniform", 3, seed=0),
                   noise=NoiseModel("gaussian-diminishing", 0.1, 0.5))
    tr = run(prob, x0, rc)
    obj, mins, ks = tr.column("objective"), running_min(tr.column("stationarity")), tr.column("k")
    ratio = float(mins[-1] / mins[np.searchsorted(ks, 20 * m)])
    out.append(CheckResult("alpha-diminishing envelope", ratio <= 0.3 and obj.max() <= 10 * obj[0], ratio, 0.3))

    prob, x0 = _spca(500, 5, lam=0.0)
    rc = RunConfig(mode="sim-async", iterations=200 * m, seed=0,
                   policy=StepsizePolicy(regime="smooth-sqrt", tau=3, m=m),
                   delay=DelaySchedule("uniform", 3, seed=0),
                   noise=NoiseModel("gaussian-constant", 0.1))
    tr = run(prob, x0, rc)
    mins, ks = running_min(tr.column("stationarity")), tr.column("k")
    ratio = float(mins[-1] / mins[np.searchsorted(ks, 20 * m)])
    bounded = bool(np.all(np.isfinite(tr.x_final)))
    out.append(CheckResult("constant-variance envelope", ratio <= 0.5 and bounded, ratio, 0.5))
    return out


SUITES = {
    "prox-oracle": _suite_prox,
    "gradient-fd": _suite_gradient,
    "engine-equivalence": _suite_equivalence,
    "lyapunov-supermartingale": _suite_lyapunov,
    "rate-slope": _suite_rate,
    "noise-regimes": _suite_noise,
}


def verify_suite(name):
    """Run a named suite and return its :class:`CheckResult` list."""
    if name not in SUITES:
        raise ConfigError(f"unknown suite {name!r}; choose from {sorted(SUITES)}", "--suite")
    t0 = time.perf_counter()
    results = SUITES[name]()
    log.info("suite %s finished in %.2fs", name, time.perf_counter() - t0)
    return results
