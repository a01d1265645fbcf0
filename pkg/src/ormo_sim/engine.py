"""
Discrete-event parameter server.

One server holds the parameter; `K` workers each compute one stochastic
gradient at a time on the copy they were last sent. The event queue is ordered
by `(busy_until, worker_id)`, so simultaneous completions go to the smallest id.
Workers compute their gradient when a parameter is dispatched to them; the
result travels with them until their completion event is popped.
"""

from __future__ import annotations

import heapq
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .exceptions import (
    SimConfigError,
    SimDeadlockError,
    SimError,
    SimRuntimeError,
    SimScheduleError,
)
from .optim import GradientMsg, ServerRule, apply_lr_schedule
from .problems import GradientSample, Problem
from .rng import Stream, check_seed, stream
from .types import DelayKind, Scheduler, Vector, WorkerStatus

logger: logging.Logger = logging.getLogger(__name__)

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class DelayModel:
    """Compute-time distribution of the workers."""

    kind: DelayKind = "deterministic"
    mean_compute_time: float = 1.0
    slow_fraction: float = 0.0
    slow_factor: float = 1.0
    sigma: float = 0.25
    """Shape of the lognormal model."""

    def __post_init__(self) -> None:
        if self.kind not in ("deterministic", "exponential", "lognormal"):
            raise SimConfigError(
                f"Unknown delay model `{self.kind}`",
                service=self.__class__.__name__,
                context={"key": "delay"},
            )
        checks: list[tuple[bool, str, str]] = [
            (self.mean_compute_time > 0.0, "compute_time", "must be positive"),
            (0.0 <= self.slow_fraction < 1.0, "slow_fraction", "must lie in [0, 1)"),
            (self.slow_factor >= 1.0, "slow_factor", "must be at least 1"),
            (self.sigma >= 0.0, "delay_sigma", "must be non-negative"),
        ]
        for ok, key, reason in checks:
            if not ok:
                raise SimConfigError(
                    f"Delay parameter `{key}` {reason}",
                    service=self.__class__.__name__,
                    context={"key": key},
                )

    def slow_workers(self, K: int, /) -> int:
        """Number of slow workers; they are ids `0 .. slow_workers(K) - 1`."""

        return math.ceil(round(self.slow_fraction * K, 9))

    def mean_for(self, worker_id: int, K: int, /) -> float:
        """Mean compute time of `worker_id`; the first slow workers get `slow_factor`."""

        if worker_id < self.slow_workers(K):
            return self.mean_compute_time * self.slow_factor
        return self.mean_compute_time

    def sample(self, rng: np.random.Generator, worker_id: int, K: int, /) -> float:
        """Draw one compute time of `worker_id`."""

        mean: float = self.mean_for(worker_id, K)
        match self.kind:
            case "deterministic":
                return mean
            case "exponential":
                return float(rng.exponential(scale=mean))
            case "lognormal":
                mu: float = math.log(mean) - 0.5 * self.sigma**2
                return float(rng.lognormal(mean=mu, sigma=self.sigma))


@dataclass
class WorkerState:
    """Parameter iteration a worker holds and when its gradient is ready."""

    worker_id: int
    held_param_iter: int
    busy_until: float
    status: WorkerStatus = "computing"
    requests: int = 0
    """Number of parameters dispatched to this worker so far."""


@dataclass(frozen=True)
class TraceRecord:
    """One server iteration: which worker arrived, its iteration index and delay."""

    t: int
    k_t: int
    ite: int
    tau: int
    sim_time: float


@dataclass(frozen=True)
class DispatchRecord:
    """A parameter sent to a worker after server iteration `at` (`-1` for the start)."""

    at: int
    worker_id: int
    param_iter: int
    request: int
    busy_until: float


@dataclass(frozen=True)
class ScriptedSchedule:
    """Arrival sequence injected verbatim in place of the event queue."""

    entries: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        last: dict[int, int] = {}
        for j, (worker_id, ite) in enumerate(self.entries):
            if not 0 <= ite <= j:
                raise SimScheduleError(
                    f"Scripted entry {j} carries iteration index {ite}, outside [0, {j}]",
                    service=self.__class__.__name__,
                    context={"entry": j, "worker": worker_id, "ite": ite},
                )
            if ite <= last.get(worker_id, -1):
                raise SimScheduleError(
                    f"Scripted iteration indexes of worker {worker_id} must strictly"
                    + f" increase, got {last[worker_id]} then {ite}",
                    service=self.__class__.__name__,
                    context={"entry": j, "worker": worker_id, "ite": ite},
                )
            last[worker_id] = ite

    @classmethod
    def from_lists(cls, workers: Sequence[int], ites: Sequence[int], /) -> ScriptedSchedule:
        if len(workers) != len(ites):
            raise SimScheduleError(
                f"Got {len(workers)} workers but {len(ites)} iteration indexes",
                service=cls.__name__,
            )
        return cls(entries=tuple(zip(workers, ites)))


@dataclass
class EngineState:
    """Cluster state between server iterations."""

    K: int
    delay: DelayModel
    seed: int
    workers: list[WorkerState]
    queue: list[tuple[float, int]] = field(default_factory=list)
    waiting: set[int] = field(default_factory=set)
    sim_time: float = 0.0
    dispatch_log: list[DispatchRecord] = field(default_factory=list)


@dataclass(frozen=True)
class MetricsRow:
    """Metrics taken every `stride` iterations and at the last one."""

    t: int
    sim_time: float
    loss: float
    grad_norm2: float
    tau: int
    b: int | None
    eta_eff: float


@dataclass
class RunResult:
    w: Vector
    trace: list[TraceRecord]
    metrics: list[MetricsRow]
    state: EngineState


class RunObserver:
    """Hooks called by `run`; the default implementation ignores every event."""

    def on_start(self, w0: Vector, rule: ServerRule, problem: Problem) -> None:
        pass

    def on_dispatch(
        self, record: DispatchRecord, sample: GradientSample, grad: Vector, msg: GradientMsg
    ) -> None:
        """A gradient has been computed for a freshly dispatched parameter."""

        pass

    def on_step(
        self,
        record: TraceRecord,
        msg: GradientMsg,
        w: Vector,
        rule: ServerRule,
        in_flight: Mapping[int, GradientMsg],
    ) -> None:
        """
        The server finished iteration `record.t`; `w` is the new parameter.
        `in_flight` holds the messages of every worker still computing.
        """

        pass

    def on_finish(self, result: RunResult) -> None:
        pass


# ======================================================================================
#   Operations
# ======================================================================================


def init_cluster(K: int, delay: DelayModel, seed: int, /) -> EngineState:
    """
    Send parameter iteration 0 to every worker.

    Raises:
        * `SimConfigError`: If `K < 1` or `seed` is not a 64-bit integer
    """

    if K < 1:
        raise SimConfigError(
            f"A cluster needs at least one worker, got K={K}",
            service="init_cluster",
            context={"key": "workers"},
        )
    seed = check_seed(seed)

    state: EngineState = EngineState(K=K, delay=delay, seed=seed, workers=[])
    for k in range(K):
        busy_until: float = delay.sample(stream(seed, Stream.COMPUTE, worker=k), k, K)
        state.workers.append(WorkerState(worker_id=k, held_param_iter=0, busy_until=busy_until))
        state.dispatch_log.append(
            DispatchRecord(at=-1, worker_id=k, param_iter=0, request=0, busy_until=busy_until)
        )
        heapq.heappush(state.queue, (busy_until, k))
    return state


def next_arrival(state: EngineState, /) -> tuple[int, int]:
    """
    Pop the earliest completion and move its worker to the waiting set.

    Raises:
        * `SimDeadlockError`: If no worker is computing
    """

    if not state.queue:
        raise SimDeadlockError(
            "Every worker is waiting; no gradient can arrive",
            service="next_arrival",
            context={"waiting": sorted(state.waiting)},
        )
    busy_until, k = heapq.heappop(state.queue)
    return _arrive(state, k, busy_until)


def scripted_arrival(state: EngineState, worker_id: int, ite: int, /) -> tuple[int, int]:
    """
    Deliver the gradient of `worker_id` out of queue order.

    Raises:
        * `SimScheduleError`: If the worker is not computing on parameter `ite`
    """

    if not 0 <= worker_id < state.K:
        raise SimScheduleError(
            f"Scripted worker {worker_id} does not exist (K={state.K})",
            service="scripted_arrival",
        )
    worker: WorkerState = state.workers[worker_id]
    if worker.status != "computing" or worker.held_param_iter != ite:
        raise SimScheduleError(
            f"Worker {worker_id} cannot deliver iteration index {ite}: it is"
            + f" {worker.status} on parameter {worker.held_param_iter}",
            service="scripted_arrival",
            context={"worker": worker_id, "ite": ite, "held": worker.held_param_iter},
        )
    state.queue = [entry for entry in state.queue if entry[1] != worker_id]
    heapq.heapify(state.queue)
    return _arrive(state, worker_id, worker.busy_until)


def _arrive(state: EngineState, k: int, busy_until: float, /) -> tuple[int, int]:
    worker: WorkerState = state.workers[k]
    state.sim_time = max(state.sim_time, busy_until)
    worker.status = "waiting"
    state.waiting.add(k)
    return k, worker.held_param_iter


def dispatch(
    state: EngineState, scheduler: Scheduler, t: int, new_param_iter: int, /
) -> EngineState:
    """
    Send parameter `new_param_iter` to the waiting workers after iteration `t`.

    The synchronous scheduler only dispatches once all `K` workers wait.
    """

    if scheduler == "synchronous" and len(state.waiting) < state.K:
        return state

    for k in sorted(state.waiting):
        worker: WorkerState = state.workers[k]
        worker.requests += 1
        compute: float = state.delay.sample(
            stream(state.seed, Stream.COMPUTE, worker=k, request=worker.requests), k, state.K
        )
        worker.held_param_iter = new_param_iter
        worker.busy_until = state.sim_time + compute
        worker.status = "computing"
        heapq.heappush(state.queue, (worker.busy_until, k))
        state.dispatch_log.append(
            DispatchRecord(
                at=t,
                worker_id=k,
                param_iter=new_param_iter,
                request=worker.requests,
                busy_until=worker.busy_until,
            )
        )
        logger.debug("Dispatched parameter %d to worker %d", new_param_iter, k)
    state.waiting.clear()
    return state


def run(
    state: EngineState,
    T: int,
    rule: ServerRule,
    problem: Problem,
    /,
    scheduler: Scheduler = "asynchronous",
    *,
    w0: Vector | None = None,
    batch_size: int = 1,
    stride: int = 50,
    schedule: ScriptedSchedule | None = None,
    observers: Iterable[RunObserver] = (),
) -> RunResult:
    """
    Drive the server loop for `T` iterations.

    Metrics are taken before the update of iteration `t` for every `t` divisible
    by `stride` and for the last iteration.

    Raises:
        * `SimConfigError`: If `T < 1`, or the rule and cluster disagree
        * `SimScheduleError`: If a scripted entry cannot be delivered
        * `SimRuntimeError`: If the oracle or the rule fails with a foreign error
    """

    _check_run_args(state, T, rule, scheduler, batch_size, stride, schedule)
    watchers: list[RunObserver] = list(observers)

    rule.reset(problem.dim)
    w: Vector = (
        problem.initial_point() if w0 is None else np.array(w0, dtype=np.float64, copy=True)
    )
    for observer in watchers:
        observer.on_start(w, rule, problem)

    in_flight: dict[int, GradientMsg] = {}
    trace: list[TraceRecord] = []
    metrics: list[MetricsRow] = []
    logger.info(
        "Running %d iterations with K=%d, %s scheduler", T, state.K, scheduler
    )

    t: int = 0
    try:
        _compute(state, state.dispatch_log, w, rule, problem, batch_size, in_flight, watchers)
        for t in range(T):
            waiting_empty: bool = not state.waiting
            if schedule is None:
                k, ite = next_arrival(state)
            else:
                k, ite = scripted_arrival(state, *schedule.entries[t])
            msg: GradientMsg = in_flight.pop(k)
            record: TraceRecord = TraceRecord(
                t=t, k_t=k, ite=ite, tau=t - ite, sim_time=state.sim_time
            )
            trace.append(record)

            if t % stride == 0 or t == T - 1:
                metrics.append(_metrics_row(record, w, rule, problem))

            w = rule.step(w, msg, t=t, waiting_empty=waiting_empty)
            for observer in watchers:
                observer.on_step(record, msg, w, rule, in_flight)

            mark: int = len(state.dispatch_log)
            _ = dispatch(state, scheduler, t, t + 1)
            _compute(
                state, state.dispatch_log[mark:], w, rule, problem, batch_size, in_flight, watchers
            )
    except SimError as err:
        err.context.setdefault("t", t)
        raise
    except Exception as err:
        raise SimRuntimeError(
            f"Iteration {t} failed: {err}",
            service="run",
            cause=err,
            context={"t": t, "seed": state.seed},
        ) from err

    result: RunResult = RunResult(w=w, trace=trace, metrics=metrics, state=state)
    for observer in watchers:
        observer.on_finish(result)
    logger.info("Finished %d iterations at sim_time %.6g", T, state.sim_time)
    return result


def _check_run_args(
    state: EngineState,
    T: int,
    rule: ServerRule,
    scheduler: Scheduler,
    batch_size: int,
    stride: int,
    schedule: ScriptedSchedule | None,
) -> None:
    problems: list[tuple[bool, str, str]] = [
        (T >= 1, "iterations", f"Iteration count must be at least 1, got {T}"),
        (batch_size >= 1, "batch", f"Batch size must be at least 1, got {batch_size}"),
        (stride >= 1, "stride", f"Metric stride must be at least 1, got {stride}"),
        (
            len(state.dispatch_log) == state.K and not state.waiting,
            "workers",
            "A run needs a freshly initialized cluster",
        ),
        (
            rule.hyper.K == state.K,
            "workers",
            f"Rule expects K={rule.hyper.K} but the cluster has K={state.K}",
        ),
        (
            rule.required_scheduler in (None, scheduler),
            "scheduler",
            f"`{rule.name}` runs only under the {rule.required_scheduler} scheduler",
        ),
    ]
    for ok, key, message in problems:
        if not ok:
            raise SimConfigError(message, service="run", context={"key": key})
    if schedule is not None and len(schedule.entries) < T:
        raise SimScheduleError(
            f"Scripted schedule has {len(schedule.entries)} entries for {T} iterations",
            service="run",
        )


def _compute(
    state: EngineState,
    records: Sequence[DispatchRecord],
    w: Vector,
    rule: ServerRule,
    problem: Problem,
    batch_size: int,
    in_flight: dict[int, GradientMsg],
    observers: Sequence[RunObserver],
) -> None:
    for record in records:
        rng: np.random.Generator = stream(
            state.seed, Stream.DATA, worker=record.worker_id, request=record.request
        )
        sample: GradientSample = GradientSample(
            sample_indices=problem.sample(rng, batch_size),
            base_param_iter=record.param_iter,
            worker_id=record.worker_id,
        )
        grad: Vector = problem.stochastic_grad(w, sample)
        payload: Vector = rule.worker_payload(record.worker_id, grad, t=record.param_iter)
        msg: GradientMsg = GradientMsg(
            grad=payload, ite=record.param_iter, worker_id=record.worker_id
        )
        in_flight[record.worker_id] = msg
        for observer in observers:
            observer.on_dispatch(record, sample, grad, msg)


def _metrics_row(
    record: TraceRecord, w: Vector, rule: ServerRule, problem: Problem
) -> MetricsRow:
    full: Vector = problem.full_gradient(w)
    return MetricsRow(
        t=record.t,
        sim_time=record.sim_time,
        loss=problem.loss(w),
        grad_norm2=float(full @ full),
        tau=record.tau,
        b=rule.head_bucket,
        eta_eff=apply_lr_schedule(rule.hyper, record.t),
    )
