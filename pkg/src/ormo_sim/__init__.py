from .config import ExperimentConfig, dumps_config, load_config, loads_config
from .engine import (
    DelayModel,
    DispatchRecord,
    EngineState,
    MetricsRow,
    RunObserver,
    RunResult,
    ScriptedSchedule,
    TraceRecord,
    WorkerState,
    dispatch,
    init_cluster,
    next_arrival,
    run,
)
from .exceptions import (
    SimConfigError,
    SimDeadlockError,
    SimError,
    SimIncomparableRunsError,
    SimNumericError,
    SimOrderingError,
    SimRegistryError,
    SimRunPathError,
    SimRuntimeError,
    SimSampleError,
    SimScheduleError,
    SimVerificationError,
)
from .experiment import dump_dataset, run_experiment, sweep, verify_experiment
from .optim import (
    GradientMsg,
    HyperParams,
    LocalMomentum,
    MomentumState,
    ServerRule,
    apply_lr_schedule,
    asgd_step,
    bucket_index,
    make_rule,
    minibatch_sgdm_reference,
    naive_asgdm_step,
    ormo_step,
    shifted_server_apply,
    shifted_worker_update,
    ssgdm_global_step,
)
from .problems import GradientSample, Problem, ProblemSpec, make_problem
from .report import compare_report
from .verify import (
    AuxState,
    GapVerifier,
    ResidualReport,
    advance_aux,
    check_minibatch_equivalence,
    check_trace_legality,
    delay_stats,
)

__all__ = [
    # Engine
    "DelayModel",
    "DispatchRecord",
    "EngineState",
    "MetricsRow",
    "RunObserver",
    "RunResult",
    "ScriptedSchedule",
    "TraceRecord",
    "WorkerState",
    "dispatch",
    "init_cluster",
    "next_arrival",
    "run",
    # Optimizers
    "GradientMsg",
    "HyperParams",
    "LocalMomentum",
    "MomentumState",
    "ServerRule",
    "apply_lr_schedule",
    "asgd_step",
    "bucket_index",
    "make_rule",
    "minibatch_sgdm_reference",
    "naive_asgdm_step",
    "ormo_step",
    "shifted_server_apply",
    "shifted_worker_update",
    "ssgdm_global_step",
    # Problems
    "GradientSample",
    "Problem",
    "ProblemSpec",
    "make_problem",
    # Verification
    "AuxState",
    "GapVerifier",
    "ResidualReport",
    "advance_aux",
    "check_minibatch_equivalence",
    "check_trace_legality",
    "delay_stats",
    # Harness
    "ExperimentConfig",
    "compare_report",
    "dump_dataset",
    "dumps_config",
    "load_config",
    "loads_config",
    "run_experiment",
    "sweep",
    "verify_experiment",
    # Exceptions
    "SimConfigError",
    "SimDeadlockError",
    "SimError",
    "SimIncomparableRunsError",
    "SimNumericError",
    "SimOrderingError",
    "SimRegistryError",
    "SimRunPathError",
    "SimRuntimeError",
    "SimSampleError",
    "SimScheduleError",
    "SimVerificationError",
]
