"""Experiment configuration: a flat YAML mapping plus ``key=value`` overrides."""

import logging
from dataclasses import asdict, dataclass, fields

import yaml

from .engine import DELAY_KINDS, MODES, SELECTIONS, DelaySchedule, RunConfig
from .errors import ConfigError, ParameterError
from .problems import LAYOUTS, DEFAULT_RHO, firm_pca_instance, spca_instance
from .schedules import NOISE_KINDS, REGIMES, NoiseModel, StepsizePolicy

log = logging.getLogger(__name__)

__all__ = ["PROBLEMS", "ExperimentConfig", "load_config", "parse_overrides"]

PROBLEMS = ("spca", "firm-pca")

# noise kinds each weight regime tolerates
_REGIME_NOISE = {
    "summable": {"none", "gaussian-summable"},
    "alpha-diminishing": {"none", "gaussian-summable", "gaussian-diminishing", "minibatch"},
    "smooth-sqrt": set(NOISE_KINDS),
}


@dataclass
class ExperimentConfig:
    # problem
    problem: str = "spca"
    n: int = 200
    d: int = 5
    lam: float = 0.5
    kappa: float = None  # None resolves to 5 * lam (or 1.0 when lam = 0)
    mu: float = 0.1
    layout: str = "column"
    rho: float = DEFAULT_RHO
    data_seed: int = None  # None resolves to seed
    data_file: str = None
    save_data: bool = False
    # engine
    mode: str = "sync"
    workers: int = 1
    selection: str = "uniform"
    epochs: float = 10
    iterations: int = None  # overrides epochs when set
    time_budget: float = None
    stride: int = None  # None = one epoch
    seed: int = 0
    delay: str = "uniform"
    lipschitz_refresh: int = None
    # schedules
    a: float = 2.0
    regime: str = "summable"
    alpha: float = 0.5
    tau: int = 0
    noise: str = "none"
    sigma0: float = 0.0
    batch_base: int = 4
    # output
    out: str = "runs/latest"
    wall_clock: bool = True

    def __post_init__(self):
        self.resolve()

    def resolve(self):
        if self.data_seed is None:
            self.data_seed = self.seed
        if self.kappa is None:
            self.kappa = 5.0 * self.lam if self.lam > 0 else 1.0
        self.validate()
        return self

    def _choice(self, key, options):
        if getattr(self, key) not in options:
            raise ConfigError(f"{getattr(self, key)!r} is not one of {list(options)}", key)

    def _positive(self, key, strict=True, integer=False):
        v = getattr(self, key)
        bad = v is None or (v <= 0 if strict else v < 0)
        if integer and not bad and int(v) != v:
            bad = True
        if bad:
            req = "a positive" if strict else "a nonnegative"
            raise ConfigError(f"must be {req} {'integer' if integer else 'number'}, got {v!r}", key)

    def validate(self):
        self._choice("problem", PROBLEMS)
        self._choice("layout", LAYOUTS)
        self._choice("mode", MODES)
        self._choice("selection", SELECTIONS)
        self._choice("regime", REGIMES)
        self._choice("noise", NOISE_KINDS)
        self._choice("delay", DELAY_KINDS)
        for key in ("n", "d", "workers", "batch_base"):
            self._positive(key, integer=True)
        for key in ("lam", "mu", "sigma0", "epochs"):
            self._positive(key, strict=False)
        self._positive("tau", strict=False, integer=True)
        if not self.a > 1:
            raise ConfigError(f"must exceed 1, got {self.a}", "a")
        if self.rho < 1:
            raise ConfigError(f"safety factor must be >= 1, got {self.rho}", "rho")
        if self.regime == "alpha-diminishing" or self.noise in ("gaussian-diminishing", "minibatch"):
            if not 0 < self.alpha < 1:
                raise ConfigError(f"must lie in (0, 1), got {self.alpha}", "alpha")
        if self.problem == "firm-pca" and not self.kappa > self.lam:
            raise ConfigError(f"firm threshold needs kappa > lam, got kappa={self.kappa}, lam={self.lam}", "kappa")
        if self.noise not in _REGIME_NOISE[self.regime]:
            raise ConfigError(
                f"noise {self.noise!r} is not admissible under regime {self.regime!r}; "
                f"allowed: {sorted(_REGIME_NOISE[self.regime])}",
                "noise",
            )
        if self.noise == "gaussian-constant" and self.regime != "smooth-sqrt":
            raise ConfigError("constant-variance noise needs regime 'smooth-sqrt'", "regime")
        if self.noise.startswith("gaussian") and self.sigma0 == 0:
            log.warning("gaussian noise with sigma0 = 0 injects nothing")
        if self.mode != "async" and self.workers != 1:
            raise ConfigError(f"mode {self.mode!r} runs a single worker; set workers=1 or mode=async", "workers")
        if self.iterations is not None:
            self._positive("iterations", strict=False, integer=True)
        for key in ("stride", "lipschitz_refresh"):
            if getattr(self, key) is not None:
                self._positive(key, integer=True)
        if self.time_budget is not None:
            self._positive("time_budget")

    # -- serialization --------------------------------------------------

    def to_dict(self):
        return asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, raw):
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping of keys to values")
        known = {f.name for f in fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"unknown key; valid keys are {sorted(known)}", key)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    # -- construction ---------------------------------------------------

    def build_problem(self, data):
        try:
            if self.problem == "spca":
                return spca_instance(data, self.d, self.lam, self.layout, self.rho)
            return firm_pca_instance(data, self.d, self.lam, self.kappa, self.mu, self.layout, self.rho)
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None

    def total_iterations(self, m):
        if self.iterations is not None:
            return int(self.iterations)
        return int(round(self.epochs * m))

    def run_config(self, problem):
        m = problem.m
        try:
            policy = StepsizePolicy(a=self.a, regime=self.regime, alpha=self.alpha, tau=self.tau, m=m)
            noise = NoiseModel(kind=self.noise, sigma0=self.sigma0, alpha=self.alpha, batch_base=self.batch_base)
            delay = DelaySchedule(kind=self.delay, tau=self.tau, seed=self.seed) if self.mode == "sim-async" else None
        except ParameterError as exc:
            raise ConfigError(str(exc)) from None
        return RunConfig(
            mode=self.mode,
            iterations=self.total_iterations(m),
            workers=self.workers,
            selection=self.selection,
            time_budget=self.time_budget,
            stride=self.stride,
            seed=self.seed,
            policy=policy,
            noise=noise,
            delay=delay,
            lipschitz_refresh=self.lipschitz_refresh,
        )


def parse_overrides(pairs):
    """``["key=value", ...]`` to a dict; values are parsed as YAML scalars."""
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value", "--set")
        out[key] = yaml.safe_load(value) if value.strip() else None
    return out


def load_config(path=None, overrides=None):
    """Read a YAML config file (optional), apply overrides, resolve and validate."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "--config") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}", "--config") from None
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a mapping of keys to values", "--config")
    raw.update(overrides or {})
    return ExperimentConfig.from_dict(raw)
