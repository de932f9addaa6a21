"""Stochastic asynchronous proximal alternating linearized minimization."""

__version__ = "0.1.0"

from .errors import ConfigError, DivergenceError, ParameterError, SapalmError, StructureError
from .model import (
    BlockLayout,
    LipschitzInfo,
    ProblemInstance,
    Regularizer,
    SmoothLoss,
    objective,
    partial_gradient,
    select_prox,
)
from .prox import (
    FirmReg,
    L1Reg,
    QuadraticReg,
    ZeroReg,
    firm_penalty,
    prox_firm,
    prox_l1,
    prox_with_quadratic,
    prox_zero,
)
from .schedules import (
    NoiseModel,
    StepsizePolicy,
    minibatch_schedule,
    noise_variance,
    sample_noise,
    stepsize,
    weight_c,
    worker_streams,
)
from .problems import (
    FactorizationData,
    FactorizationState,
    estimate_lipschitz,
    firm_pca_instance,
    generate_data,
    init_state,
    load_data,
    minibatch_gradient,
    save_data,
    spca_instance,
    spca_partial_grad,
    spca_value,
)
from .diagnostics import (
    delay_stats,
    fit_rate_slope,
    lyapunov,
    pt_weights,
    sample_PT,
    stationarity,
)
from .engine import DelaySchedule, RunConfig, RunTrace, run, run_sim_async, run_sync
from .parallel import check_write_log, run_async
from .config import ExperimentConfig, load_config
from .harness import run_experiment, speedup_table, verify_suite
