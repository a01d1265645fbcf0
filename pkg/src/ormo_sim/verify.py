"""
Numerical checks of the ordered-momentum analysis on live runs.

The auxiliary sequences `(u_hat, w_hat, y_hat)` consume every dispatched
gradient in `(ite, worker)` order. Because workers compute their gradient at
dispatch time, that order is exactly the order in which gradients are produced,
so the sequences advance inside `on_dispatch` without a reordering buffer. The
first `K` gradients (all taken at iteration 0) form index 1; the `n`-th gradient
after them produces index `n + 1`, with the beta-scaled step when
`K | (n - 1)`.

After server iteration `t` every dispatched gradient has been consumed, and the
gap between the real and auxiliary sequences is the bucket-weighted sum of the
gradients still in flight.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import override

import numpy as np

from .engine import (
    DelayModel,
    DispatchRecord,
    RunObserver,
    RunResult,
    TraceRecord,
    init_cluster,
    run,
)
from .exceptions import SimConfigError, SimOrderingError
from .optim import (
    GradientMsg,
    HyperParams,
    OrMoRule,
    ServerRule,
    SsgdmGlobalRule,
    bucket_index,
    geometric_coefficient,
    minibatch_sgdm_reference,
    momentum_weight,
)
from .problems import GradientSample, Problem
from .types import Scheduler, Vector

logger: logging.Logger = logging.getLogger(__name__)

TOLERANCE: float = 1e-9
LEDGER_TOLERANCE: float = 1e-10
LEDGER_EVERY: int = 100

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class Residual:
    index: int
    absolute: float
    relative: float


@dataclass(frozen=True)
class ResidualReport:
    """Worst residual of one identity over a run."""

    name: str
    max_abs: float
    max_rel: float
    at: int
    """Index at which `max_rel` was reached, `-1` when nothing was checked."""
    checked: int
    skipped: int
    tolerance: float
    passed: bool
    findings: int = 0
    """Points where a bound was exceeded at all, even inside the tolerance."""

    @classmethod
    def from_residuals(
        cls,
        name: str,
        residuals: Sequence[Residual],
        /,
        tolerance: float = TOLERANCE,
        skipped: int = 0,
        findings: int = 0,
    ) -> ResidualReport:
        if not residuals:
            return cls(
                name=name,
                max_abs=0.0,
                max_rel=0.0,
                at=-1,
                checked=0,
                skipped=skipped,
                tolerance=tolerance,
                passed=True,
                findings=findings,
            )
        worst: Residual = max(residuals, key=lambda r: r.relative)
        return cls(
            name=name,
            max_abs=max(r.absolute for r in residuals),
            max_rel=worst.relative,
            at=worst.index,
            checked=len(residuals),
            skipped=skipped,
            tolerance=tolerance,
            passed=worst.relative <= tolerance,
            findings=findings,
        )

    def as_dict(self) -> dict[str, object]:
        return {
            "name": self.name,
            "max_abs": self.max_abs,
            "max_rel": self.max_rel,
            "at": self.at,
            "checked": self.checked,
            "skipped": self.skipped,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "findings": self.findings,
        }


@dataclass
class AuxState:
    K: int
    w0: Vector
    u_hat: Vector
    w_hat: Vector
    y_hat: Vector
    w_hat_history: deque[Vector]
    index: int = 0
    """Index `n` of the current `u_hat_n`; 0 until the first `K` gradients arrived."""
    seen: int = 0
    last: tuple[int, int] = (-1, -1)

    @classmethod
    def start(cls, K: int, w0: Vector, /) -> AuxState:
        return cls(
            K=K,
            w0=np.array(w0, dtype=np.float64, copy=True),
            u_hat=np.zeros_like(w0, dtype=np.float64),
            w_hat=np.array(w0, dtype=np.float64, copy=True),
            y_hat=np.zeros_like(w0, dtype=np.float64),
            w_hat_history=deque(maxlen=K + 1),
        )

    @property
    def head(self) -> int:
        """Head bucket of `u_hat_n`."""

        return bucket_index(max(self.index - 1, 0), self.K)


@dataclass(frozen=True)
class DelayStats:
    mean: float
    max: int
    histogram: dict[int, int]


@dataclass(frozen=True)
class EquivalenceGap:
    w: float
    u: float


@dataclass(frozen=True)
class TrendSummary:
    first_half: float
    second_half: float

    @property
    def improving(self) -> bool:
        return self.second_half < self.first_half


# ======================================================================================
#   Auxiliary sequences
# ======================================================================================


def advance_aux(aux: AuxState, msg: GradientMsg, h: HyperParams, /) -> AuxState:
    """
    Consume the next gradient in `(ite, worker)` order.

    Raises:
        * `SimOrderingError`: If `msg` is out of order or from the wrong bucket
    """

    key: tuple[int, int] = (msg.ite, msg.worker_id)
    if key <= aux.last:
        raise SimOrderingError(
            f"Auxiliary sequences got gradient {key} after {aux.last}",
            service="advance_aux",
            layer="VERIFIER",
            context={"ite": msg.ite, "worker": msg.worker_id},
        )

    g: Vector = msg.grad
    if aux.index == 0:
        if msg.ite != 0:
            raise SimOrderingError(
                f"Expected {aux.K - aux.seen} more gradients from iteration 0,"
                + f" got iteration {msg.ite}",
                service="advance_aux",
                layer="VERIFIER",
            )
        aux.u_hat = aux.u_hat + h.eta * g
        aux.w_hat = aux.w_hat - h.eta * g
        aux.seen += 1
        if aux.seen == aux.K:
            aux.index = 1
            aux.y_hat = (aux.w_hat - h.beta * aux.w0) / (1.0 - h.beta)
            aux.w_hat_history.append(aux.w_hat)
        aux.last = key
        return aux

    n: int = aux.index
    if bucket_index(msg.ite, aux.K) != bucket_index(n, aux.K):
        raise SimOrderingError(
            f"Gradient from iteration {msg.ite} cannot produce auxiliary index {n + 1}",
            service="advance_aux",
            layer="VERIFIER",
            context={"ite": msg.ite, "n": n},
        )
    if (n - 1) % aux.K == 0:
        aux.w_hat = aux.w_hat - h.beta * aux.u_hat - h.eta * g
        aux.u_hat = h.beta * aux.u_hat + h.eta * g
    else:
        aux.w_hat = aux.w_hat - h.eta * g
        aux.u_hat = aux.u_hat + h.eta * g
    aux.y_hat = aux.y_hat - (h.eta / (1.0 - h.beta)) * g
    aux.index = n + 1
    aux.w_hat_history.append(aux.w_hat)
    aux.last = key
    return aux


# ======================================================================================
#   Identities
# ======================================================================================


def _residual(index: int, lhs: Vector, rhs: Vector, /) -> Residual:
    absolute: float = float(np.linalg.norm(lhs - rhs))
    return Residual(
        index=index, absolute=absolute, relative=absolute / (1.0 + float(np.linalg.norm(lhs)))
    )


def check_momentum_gap(
    t: int, aux: AuxState, u: Vector, outstanding: Sequence[GradientMsg], h: HyperParams, /
) -> Residual:
    """`u_hat - u` against the bucket-weighted sum of the gradients still in flight."""

    rhs: Vector = np.zeros_like(u)
    for msg in outstanding:
        delta: int = aux.head - bucket_index(msg.ite, h.K)
        rhs = rhs + h.eta * momentum_weight(h.beta, delta) * msg.grad
    return _residual(t, aux.u_hat - u, rhs)


def check_parameter_gap(
    t: int, aux: AuxState, w: Vector, outstanding: Sequence[GradientMsg], h: HyperParams, /
) -> Residual:
    """`w_hat - w` against the compensated sum of the gradients still in flight."""

    rhs: Vector = np.zeros_like(w)
    for msg in outstanding:
        delta: int = aux.head - bucket_index(msg.ite, h.K)
        rhs = rhs - h.eta * geometric_coefficient(h.beta, delta) * msg.grad
    return _residual(t, aux.w_hat - w, rhs)


def check_lookahead_identity(aux: AuxState, h: HyperParams, /) -> Residual | None:
    """
    `y_hat_n == (w_hat_n - beta * w_hat_{n-K}) / (1 - beta)` for `n > 1`, `K | (n-1)`.

    Returns `None` at indices where the identity does not apply.
    """

    n: int = aux.index
    if n <= 1 or (n - 1) % aux.K != 0 or len(aux.w_hat_history) < aux.K + 1:
        return None
    rhs: Vector = (aux.w_hat - h.beta * aux.w_hat_history[0]) / (1.0 - h.beta)
    return _residual(n, aux.y_hat, rhs)


def lookahead_bound(h: HyperParams, G: float, /) -> float:
    """`4 * eta^2 * K^2 * G^2 / (1 - beta)^4`."""

    return 4.0 * h.eta**2 * h.K**2 * G**2 / (1.0 - h.beta) ** 4


def check_lookahead_bound(
    gaps: Sequence[tuple[int, float]], G: float, h: HyperParams, /
) -> ResidualReport:
    """
    `||y_hat_n - w_hat_n||^2` against its bound with the observed gradient norm `G`.

    Any excess is counted as a finding; the report fails only when the excess
    is beyond the tolerance relative to `1 + bound`.
    """

    bound: float = lookahead_bound(h, G)
    residuals: list[Residual] = []
    findings: int = 0
    for n, gap in gaps:
        excess: float = max(gap - bound, 0.0)
        if excess > 0.0:
            findings += 1
        residuals.append(Residual(index=n, absolute=excess, relative=excess / (1.0 + bound)))
    if findings:
        logger.warning(
            "Lookahead gap exceeded its bound %.6g at %d of %d indexes", bound, findings, len(gaps)
        )
    return ResidualReport.from_residuals("lookahead_bound", residuals, findings=findings)


def check_ledger(
    t: int,
    u: Vector,
    received: Sequence[tuple[int, Vector]],
    head: int,
    h: HyperParams,
    /,
) -> Residual:
    """Momentum recomputed from scratch as the bucket-weighted sum of received gradients."""

    if not received:
        return _residual(t, u, np.zeros_like(u))
    weights: Vector = np.array(
        [h.eta * momentum_weight(h.beta, head - bucket_index(ite, h.K)) for ite, _ in received]
    )
    grads: Vector = np.stack([g for _, g in received])
    return _residual(t, u, weights @ grads)


# ======================================================================================
#   Observers
# ======================================================================================


class GapVerifier(RunObserver):
    """
    Evolve the auxiliary sequences next to an ordered-momentum run and check the
    gap identities after every server iteration.

    Raises:
        * `SimConfigError`: If the run does not use `OrMoRule` with a constant rate
    """

    def __init__(self, track_noise: bool = False) -> None:
        self.track_noise: bool = track_noise
        self.hyper: HyperParams | None = None
        self.aux: AuxState | None = None
        self.problem: Problem | None = None

        self.momentum_gaps: list[Residual] = []
        self.parameter_gaps: list[Residual] = []
        self.lookahead: list[Residual] = []
        self.lookahead_skipped: int = 0
        self.lookahead_gaps: list[tuple[int, float]] = []
        self.ledger: list[Residual] = []
        self.head_law: list[Residual] = []
        self.received: list[tuple[int, Vector]] = []

        self.G: float = 0.0
        self._peaks: dict[str, tuple[float, Vector, Vector]] = {}
        self.newest: int = 0
        self._w: Vector = np.zeros(0)
        self._last: tuple[int, Vector, int] | None = None

    @override
    def on_start(self, w0: Vector, rule: ServerRule, problem: Problem) -> None:
        if not isinstance(rule, OrMoRule) or rule.hyper.lr_schedule:
            raise SimConfigError(
                "Verification needs the `ormo` rule with an empty learning-rate schedule",
                service=self.__class__.__name__,
                context={"rule": rule.name},
            )
        self.hyper = rule.hyper
        self.problem = problem
        self.aux = AuxState.start(rule.hyper.K, w0)
        self._w = w0

    @override
    def on_dispatch(
        self, record: DispatchRecord, sample: GradientSample, grad: Vector, msg: GradientMsg
    ) -> None:
        assert self.aux is not None and self.hyper is not None
        previous: int = self.aux.index
        _ = advance_aux(self.aux, msg, self.hyper)
        self.newest = max(self.newest, record.param_iter)
        self.G = max(self.G, float(np.linalg.norm(grad)))
        if self.track_noise and self.problem is not None:
            full: Vector = self.problem.full_gradient(self._w)
            self._keep_peak("noise", float(np.sum((grad - full) ** 2)), grad, full)
            self._keep_peak("grad", float(grad @ grad), grad, full)

        if self.aux.index == previous:
            return
        y_gap: Vector = self.aux.y_hat - self.aux.w_hat
        self.lookahead_gaps.append((self.aux.index, float(y_gap @ y_gap)))
        residual: Residual | None = check_lookahead_identity(self.aux, self.hyper)
        if residual is None:
            self.lookahead_skipped += 1
        else:
            self.lookahead.append(residual)

    @override
    def on_step(
        self,
        record: TraceRecord,
        msg: GradientMsg,
        w: Vector,
        rule: ServerRule,
        in_flight: Mapping[int, GradientMsg],
    ) -> None:
        assert self.aux is not None and self.hyper is not None
        self._w = w
        t: int = record.t
        u: Vector | None = rule.momentum
        head: int | None = rule.head_bucket
        assert u is not None and head is not None

        outstanding: list[GradientMsg] = [m for m in in_flight.values() if m.ite <= t]
        self.momentum_gaps.append(check_momentum_gap(t, self.aux, u, outstanding, self.hyper))
        self.parameter_gaps.append(check_parameter_gap(t, self.aux, w, outstanding, self.hyper))

        expected: int = bucket_index(self.newest, self.hyper.K)
        self.head_law.append(
            Residual(
                index=t, absolute=float(abs(head - expected)), relative=float(head != expected)
            )
        )

        self.received.append((msg.ite, msg.grad))
        if t % LEDGER_EVERY == 0:
            self.ledger.append(check_ledger(t, u, self.received, head, self.hyper))
        self._last = (t, u, head)

    @override
    def on_finish(self, result: RunResult) -> None:
        if self.hyper is None or self._last is None:
            return
        t, u, head = self._last
        if t % LEDGER_EVERY != 0:
            self.ledger.append(check_ledger(t, u, self.received, head, self.hyper))

    def _keep_peak(self, key: str, value: float, grad: Vector, full: Vector, /) -> None:
        if key not in self._peaks or value > self._peaks[key][0]:
            self._peaks[key] = (value, grad.copy(), full)

    def observed(self) -> list[tuple[Vector, Vector]]:
        """Gradient and full-gradient pairs at the largest noise and gradient norm seen."""

        return [(grad, full) for _, grad, full in self._peaks.values()]

    def reports(self) -> list[ResidualReport]:
        assert self.hyper is not None
        return [
            ResidualReport.from_residuals("momentum_gap", self.momentum_gaps),
            ResidualReport.from_residuals("parameter_gap", self.parameter_gaps),
            ResidualReport.from_residuals(
                "lookahead_identity", self.lookahead, skipped=self.lookahead_skipped
            ),
            check_lookahead_bound(self.lookahead_gaps, self.G, self.hyper),
            ResidualReport.from_residuals(
                "momentum_ledger", self.ledger, tolerance=LEDGER_TOLERANCE
            ),
            ResidualReport.from_residuals("head_bucket", self.head_law, tolerance=0.0),
        ]


class TrajectoryRecorder(RunObserver):
    """Copies of the parameter (and momentum) after every selected iteration."""

    def __init__(self, when: Callable[[int], bool] | None = None) -> None:
        self.when: Callable[[int], bool] | None = when
        self.steps: list[int] = []
        self.w: list[Vector] = []
        self.u: list[Vector | None] = []
        self.b: list[int | None] = []

    @override
    def on_step(
        self,
        record: TraceRecord,
        msg: GradientMsg,
        w: Vector,
        rule: ServerRule,
        in_flight: Mapping[int, GradientMsg],
    ) -> None:
        if self.when is not None and not self.when(record.t):
            return
        u: Vector | None = rule.momentum
        self.steps.append(record.t)
        self.w.append(w.copy())
        self.u.append(None if u is None else u.copy())
        self.b.append(rule.head_bucket)


class SampleLog(RunObserver):
    """Sample of every dispatched gradient keyed by `(param_iter, worker_id)`."""

    def __init__(self) -> None:
        self.samples: dict[tuple[int, int], GradientSample] = {}

    @override
    def on_dispatch(
        self, record: DispatchRecord, sample: GradientSample, grad: Vector, msg: GradientMsg
    ) -> None:
        self.samples[(record.param_iter, record.worker_id)] = sample


# ======================================================================================
#   Traces
# ======================================================================================


def delay_stats(trace: Sequence[TraceRecord], /) -> DelayStats:
    """Mean, max and histogram of the delays in `trace`."""

    taus: list[int] = [record.tau for record in trace]
    if not taus:
        return DelayStats(mean=0.0, max=0, histogram={})
    return DelayStats(
        mean=float(np.mean(taus)), max=max(taus), histogram=dict(sorted(Counter(taus).items()))
    )


def check_trace_legality(
    trace: Sequence[TraceRecord],
    dispatch_log: Sequence[DispatchRecord],
    scheduler: Scheduler,
    K: int,
    /,
) -> list[str]:
    """
    Recompute every iteration index from the dispatch log.

    Returns a description of each violation; an empty list means the trace is legal.
    """

    pending: dict[int, deque[DispatchRecord]] = {k: deque() for k in range(K)}
    for record in dispatch_log:
        pending[record.worker_id].append(record)

    violations: list[str] = []
    last_ite: dict[int, int] = {}
    last_time: float = 0.0
    for record in trace:
        k: int = record.k_t
        if not pending.get(k):
            violations.append(f"t={record.t}: worker {k} delivered without a dispatch")
            continue
        sent: DispatchRecord = pending[k].popleft()
        if sent.at >= record.t:
            violations.append(f"t={record.t}: worker {k} delivered before its dispatch")
        if sent.param_iter != record.ite:
            violations.append(
                f"t={record.t}: worker {k} delivered ite={record.ite}, was sent {sent.param_iter}"
            )
        if sent.param_iter != sent.at + 1:
            violations.append(
                f"t={record.t}: parameter {sent.param_iter} sent after iteration {sent.at}"
            )
        if scheduler == "synchronous" and record.ite != (record.t // K) * K:
            violations.append(f"t={record.t}: synchronous ite={record.ite} is not floor(t/K)K")
        if record.ite <= last_ite.get(k, -1):
            violations.append(f"t={record.t}: worker {k} iteration indexes not increasing")
        if record.tau != record.t - record.ite or record.tau < 0:
            violations.append(f"t={record.t}: tau={record.tau} inconsistent with ite")
        if record.sim_time < last_time:
            violations.append(f"t={record.t}: sim_time went backwards")
        last_ite[k] = record.ite
        last_time = record.sim_time
    return violations


# ======================================================================================
#   Equivalences & trends
# ======================================================================================


def max_coordinate_gap(a: Sequence[Vector], b: Sequence[Vector], /) -> float:
    """Largest absolute coordinate difference between two equally long trajectories."""

    if len(a) != len(b):
        raise SimConfigError(
            f"Trajectories differ in length: {len(a)} vs {len(b)}", service="max_coordinate_gap"
        )
    if not a:
        return 0.0
    return float(max(np.max(np.abs(x - y)) for x, y in zip(a, b)))


def _relative(x: Vector, ref: Vector, /) -> float:
    scale: float = float(np.linalg.norm(ref))
    gap: float = float(np.linalg.norm(x - ref))
    return gap / scale if scale > 0.0 else gap


def check_minibatch_equivalence(
    problem: Problem,
    K: int,
    S: int,
    eta: float,
    beta: float,
    /,
    seed: int = 0,
    batch_size: int = 1,
    delay: DelayModel | None = None,
) -> EquivalenceGap:
    """
    Split-step SSGDm sampled every `K` iterations against mini-batch SGDm with
    rate `K * eta`, fed the same samples.
    """

    hyper: HyperParams = HyperParams(eta=eta, beta=beta, K=K)
    recorder: TrajectoryRecorder = TrajectoryRecorder(when=lambda t: (t + 1) % K == 0)
    samples: SampleLog = SampleLog()
    w0: Vector = problem.initial_point()
    _ = run(
        init_cluster(K, delay or DelayModel(), seed),
        K * S,
        SsgdmGlobalRule(hyper),
        problem,
        "synchronous",
        w0=w0,
        batch_size=batch_size,
        stride=K * S,
        observers=(recorder, samples),
    )

    w_ref: Vector = w0
    u_ref: Vector = np.zeros_like(w0)
    gap_w: float = 0.0
    gap_u: float = 0.0
    for s in range(S):
        batch: list[Vector] = [
            problem.stochastic_grad(w_ref, samples.samples[(s * K, k)]) for k in range(K)
        ]
        w_ref, u_ref = minibatch_sgdm_reference(w_ref, u_ref, batch, K * eta, beta)
        u_split: Vector | None = recorder.u[s]
        assert u_split is not None
        gap_w = max(gap_w, _relative(recorder.w[s], w_ref))
        gap_u = max(gap_u, _relative(u_split, u_ref))
    return EquivalenceGap(w=gap_w, u=gap_u)


def convergence_trend(grad_norm2: Sequence[float], /) -> TrendSummary:
    """Mean squared gradient norm over the first and the second half of a run."""

    half: int = len(grad_norm2) // 2
    if half == 0:
        raise SimConfigError(
            "A trend needs at least two metric rows", service="convergence_trend"
        )
    return TrendSummary(
        first_half=float(np.mean(grad_norm2[:half])),
        second_half=float(np.mean(grad_norm2[half:])),
    )


def convergence_step_size(
    beta: float, K: int, L: float, /, sigma: float | None = None, T: int | None = None
) -> float:
    """
    Largest constant rate covered by the ordered-momentum convergence rate:
    `min((1 - beta) / (2KL), 1 / (sigma sqrt(T)), 1 / (K^(2/3) T^(1/3)))`.

    Terms whose inputs are missing are left out.
    """

    candidates: list[float] = [(1.0 - beta) / (2.0 * K * L)]
    if sigma is not None and T is not None and sigma > 0.0:
        candidates.append(1.0 / (sigma * np.sqrt(T)))
    if T is not None:
        candidates.append(1.0 / (K ** (2.0 / 3.0) * T ** (1.0 / 3.0)))
    return float(min(candidates))
