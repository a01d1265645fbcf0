from types import ModuleType

import numpy as np
import pytest

from ormo_sim import (
    DelayModel,
    EngineState,
    HyperParams,
    RunResult,
    ScriptedSchedule,
    SimConfigError,
    SimDeadlockError,
    SimRuntimeError,
    SimScheduleError,
    dispatch,
    engine,
    experiment,
    init_cluster,
    make_rule,
    next_arrival,
    optim,
    problems,
    run,
    verify,
)
from ormo_sim.problems import NoisyQuadratic
from ormo_sim.types import Scheduler
from ormo_sim.verify import check_trace_legality, delay_stats

from ._classes import FailingQuadratic, quadratic_spec


def _asgd(K: int) -> HyperParams:
    return HyperParams(eta=0.01, beta=0.0, K=K)


# ======================================================================================
#   Cluster
# ======================================================================================


def test_init_cluster_rejects_empty_cluster() -> None:
    """Test a cluster without workers."""

    with pytest.raises(SimConfigError, match="at least one worker"):
        _ = init_cluster(0, DelayModel(), 0)


def test_init_cluster_sends_parameter_zero() -> None:
    """Test every worker starts on parameter 0 and computes."""

    state: EngineState = init_cluster(4, DelayModel(), 0)

    assert [w.held_param_iter for w in state.workers] == [0, 0, 0, 0]
    assert all(w.status == "computing" for w in state.workers)
    assert [r.at for r in state.dispatch_log] == [-1, -1, -1, -1]
    assert not state.waiting


def test_slow_workers_get_the_slow_factor() -> None:
    """Test the slowest ids take `slow_factor` times the mean compute time."""

    delay: DelayModel = DelayModel(slow_fraction=1 / 16, slow_factor=10.0)
    state: EngineState = init_cluster(16, delay, 0)

    assert delay.slow_workers(16) == 1
    assert state.workers[0].busy_until == 10.0
    assert {w.busy_until for w in state.workers[1:]} == {1.0}


def test_invalid_delay_model() -> None:
    """Test delay model validation."""

    with pytest.raises(SimConfigError):
        _ = DelayModel(kind="pareto")  # pyright: ignore[reportArgumentType]

    with pytest.raises(SimConfigError) as info:
        _ = DelayModel(slow_factor=0.5)

    assert info.value.context["key"] == "slow_factor"


def test_same_seed_same_compute_times() -> None:
    """Test compute times depend only on the seed."""

    delay: DelayModel = DelayModel(kind="lognormal")
    first: EngineState = init_cluster(8, delay, 42)
    second: EngineState = init_cluster(8, delay, 42)
    other: EngineState = init_cluster(8, delay, 43)

    assert [w.busy_until for w in first.workers] == [w.busy_until for w in second.workers]
    assert [w.busy_until for w in first.workers] != [w.busy_until for w in other.workers]


def test_next_arrival_without_computing_worker() -> None:
    """Test deadlock once every worker waits."""

    state: EngineState = init_cluster(1, DelayModel(), 0)
    _ = next_arrival(state)

    with pytest.raises(SimDeadlockError):
        _ = next_arrival(state)


def test_synchronous_dispatch_waits_for_barrier() -> None:
    """Test the synchronous scheduler only dispatches with all workers waiting."""

    state: EngineState = init_cluster(2, DelayModel(), 0)
    k, ite = next_arrival(state)
    _ = dispatch(state, "synchronous", 0, 1)

    assert (k, ite) == (0, 0)
    assert state.waiting == {0}
    assert state.workers[0].status == "waiting"

    _ = next_arrival(state)
    _ = dispatch(state, "synchronous", 1, 2)

    assert not state.waiting
    assert [w.held_param_iter for w in state.workers] == [2, 2]
    assert [w.requests for w in state.workers] == [1, 1]


# ======================================================================================
#   Runs
# ======================================================================================


def test_round_robin_under_deterministic_delays(quadratic: NoisyQuadratic) -> None:
    """Test equal compute times cycle the workers with constant staleness."""

    K: int = 4
    result: RunResult = run(
        init_cluster(K, DelayModel(), 0), 20, make_rule("asgd", _asgd(K)), quadratic
    )

    assert [r.k_t for r in result.trace] == [t % K for t in range(20)]
    assert [r.tau for r in result.trace[:K]] == [0, 1, 2, 3]
    assert all(r.tau == K - 1 for r in result.trace[K:])


def test_single_worker_has_no_staleness(quadratic: NoisyQuadratic) -> None:
    """Test `K = 1` delivers `ite = t`."""

    result: RunResult = run(
        init_cluster(1, DelayModel(kind="exponential"), 5),
        30,
        make_rule("asgd", _asgd(1)),
        quadratic,
    )

    assert all(r.ite == r.t and r.tau == 0 for r in result.trace)


def test_synchronous_iteration_indexes(quadratic: NoisyQuadratic) -> None:
    """Test the synchronous scheduler delivers `ite = floor(t / K) K`."""

    K: int = 4
    result: RunResult = run(
        init_cluster(K, DelayModel(kind="lognormal"), 1),
        40,
        make_rule("ssgd", _asgd(K)),
        quadratic,
        "synchronous",
    )

    assert all(r.ite == (r.t // K) * K for r in result.trace)
    assert delay_stats(result.trace).histogram == {0: 10, 1: 10, 2: 10, 3: 10}


def test_asynchronous_worker_receives_newest_parameter(quadratic: NoisyQuadratic) -> None:
    """Test a worker delivering at `t` is next seen with `ite = t + 1`."""

    result: RunResult = run(
        init_cluster(6, DelayModel(kind="exponential"), 2),
        200,
        make_rule("asgd", _asgd(6)),
        quadratic,
    )

    last: dict[int, int] = {}
    for record in result.trace:
        if record.k_t in last:
            assert record.ite == last[record.k_t] + 1
        last[record.k_t] = record.t


@pytest.mark.parametrize("scheduler", ["asynchronous", "synchronous"])
def test_trace_is_legal(quadratic: NoisyQuadratic, scheduler: Scheduler) -> None:
    """Test the trace agrees with the dispatch log."""

    state: EngineState = init_cluster(5, DelayModel(kind="lognormal"), 9)
    result: RunResult = run(state, 100, make_rule("asgd", _asgd(5)), quadratic, scheduler)

    assert check_trace_legality(result.trace, state.dispatch_log, scheduler, 5) == []
    times: list[float] = [r.sim_time for r in result.trace]
    assert times == sorted(times)


def test_runs_are_deterministic(quadratic: NoisyQuadratic, heterogeneous: DelayModel) -> None:
    """Test identical inputs give identical traces and parameters."""

    results: list[RunResult] = [
        run(
            init_cluster(8, heterogeneous, 7),
            150,
            make_rule("ormo", HyperParams(eta=0.01, beta=0.9, K=8)),
            quadratic,
            batch_size=3,
        )
        for _ in range(2)
    ]

    assert results[0].trace == results[1].trace
    assert results[0].metrics == results[1].metrics
    np.testing.assert_array_equal(results[0].w, results[1].w)


def test_trace_does_not_depend_on_optimizer(quadratic: NoisyQuadratic) -> None:
    """Test the schedule is fixed by `(seed, K, delay)` alone."""

    traces = [
        run(
            init_cluster(4, DelayModel(kind="lognormal"), 3),
            80,
            make_rule(name, HyperParams(eta=0.01, beta=0.9, K=4)),
            quadratic,
        ).trace
        for name in ("asgd", "naive_asgdm", "shifted", "ormo")
    ]

    assert all(trace == traces[0] for trace in traces[1:])


def test_heterogeneous_workers_raise_staleness(
    quadratic: NoisyQuadratic, heterogeneous: DelayModel
) -> None:
    """Test a ten-times slower worker delivers far staler gradients."""

    def max_tau(delay: DelayModel) -> int:
        result: RunResult = run(
            init_cluster(16, delay, 0), 2000, make_rule("asgd", _asgd(16)), quadratic
        )
        return delay_stats(result.trace).max

    homogeneous: int = max_tau(DelayModel(kind="lognormal"))
    slow: int = max_tau(heterogeneous)

    assert slow > homogeneous
    assert slow >= 100


def test_metrics_stride(quadratic: NoisyQuadratic) -> None:
    """Test metrics every `stride` iterations plus the last one."""

    result: RunResult = run(
        init_cluster(2, DelayModel(), 0), 10, make_rule("asgd", _asgd(2)), quadratic, stride=4
    )

    assert [m.t for m in result.metrics] == [0, 4, 8, 9]
    assert all(m.b is None for m in result.metrics)
    assert result.metrics[0].loss == pytest.approx(quadratic.loss(quadratic.initial_point()))


@pytest.mark.parametrize(
    ("T", "kwargs"),
    [(0, {}), (5, {"batch_size": 0}), (5, {"stride": 0})],
)
def test_invalid_run_arguments(quadratic: NoisyQuadratic, T: int, kwargs: dict[str, int]) -> None:
    """Test run argument validation."""

    with pytest.raises(SimConfigError):
        _ = run(
            init_cluster(2, DelayModel(), 0), T, make_rule("asgd", _asgd(2)), quadratic, **kwargs
        )


def test_run_rejects_mismatched_cluster(quadratic: NoisyQuadratic) -> None:
    """Test rule and cluster must agree on `K` and the scheduler."""

    with pytest.raises(SimConfigError, match="K=3"):
        _ = run(init_cluster(2, DelayModel(), 0), 5, make_rule("asgd", _asgd(3)), quadratic)

    with pytest.raises(SimConfigError, match="synchronous"):
        _ = run(
            init_cluster(2, DelayModel(), 0),
            5,
            make_rule("ssgdm_global", HyperParams(eta=0.1, beta=0.9, K=2)),
            quadratic,
        )


def test_run_rejects_used_cluster(quadratic: NoisyQuadratic) -> None:
    """Test a cluster can only drive one run."""

    state: EngineState = init_cluster(2, DelayModel(), 0)
    _ = run(state, 5, make_rule("asgd", _asgd(2)), quadratic)

    with pytest.raises(SimConfigError, match="freshly initialized"):
        _ = run(state, 5, make_rule("asgd", _asgd(2)), quadratic)


# ======================================================================================
#   Scripted schedules
# ======================================================================================


def test_scripted_schedule_validation() -> None:
    """Test a script cannot reference the future or repeat a worker's index."""

    with pytest.raises(SimScheduleError, match="outside"):
        _ = ScriptedSchedule.from_lists([0, 1], [0, 2])

    with pytest.raises(SimScheduleError, match="strictly"):
        _ = ScriptedSchedule.from_lists([0, 0], [0, 0])

    with pytest.raises(SimScheduleError):
        _ = ScriptedSchedule.from_lists([0, 1], [0])


def test_scripted_worker_must_hold_parameter(quadratic: NoisyQuadratic) -> None:
    """Test delivering an index the worker was never sent."""

    schedule: ScriptedSchedule = ScriptedSchedule.from_lists([0, 1, 1], [0, 0, 1])

    with pytest.raises(SimScheduleError, match="cannot deliver") as info:
        _ = run(
            init_cluster(2, DelayModel(), 0),
            3,
            make_rule("asgd", _asgd(2)),
            quadratic,
            schedule=schedule,
        )

    assert info.value.context["t"] == 2


def test_short_script(quadratic: NoisyQuadratic) -> None:
    """Test a script must cover every iteration."""

    with pytest.raises(SimScheduleError, match="entries"):
        _ = run(
            init_cluster(2, DelayModel(), 0),
            3,
            make_rule("asgd", _asgd(2)),
            quadratic,
            schedule=ScriptedSchedule.from_lists([0], [0]),
        )


# ======================================================================================
#   Failures
# ======================================================================================


def test_foreign_error_is_wrapped_with_iteration() -> None:
    """Test an oracle failure surfaces as a runtime error at its iteration."""

    problem: FailingQuadratic = FailingQuadratic(quadratic_spec(), fail_at=3)

    with pytest.raises(SimRuntimeError) as info:
        _ = run(init_cluster(2, DelayModel(), 0), 10, make_rule("asgd", _asgd(2)), problem)

    assert info.value.context["t"] == 2
    assert isinstance(info.value.__cause__, ValueError)


# ======================================================================================
#   Documentation
# ======================================================================================


@pytest.mark.parametrize(
    ("module", "name"),
    [
        (optim, "asgd_step"),
        (optim, "naive_asgdm_step"),
        (engine, "WorkerState"),
        (engine, "TraceRecord"),
        (engine, "EngineState"),
        (engine, "MetricsRow"),
        (verify, "delay_stats"),
        (experiment, "write_trace"),
        (experiment, "write_metrics"),
        (experiment, "SeedOutcome"),
        (experiment, "ExperimentSummary"),
    ],
)
def test_public_names_are_documented(module: ModuleType, name: str) -> None:
    """Test public names carry their own docstring, not the generated signature."""

    doc: str | None = getattr(module, name).__doc__

    assert doc
    assert not doc.startswith(f"{name}(")


@pytest.mark.parametrize(
    "method",
    [
        engine.DelayModel.mean_for,
        optim.ServerRule.step,
        problems.Problem._batch_loss,
        problems.Problem._batch_gradient,
        problems.Problem.dataset,
    ],
)
def test_methods_are_documented(method: object) -> None:
    """Test methods, abstract ones included, carry a docstring."""

    assert getattr(method, "__doc__", None)
