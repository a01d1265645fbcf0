"""
Server-side update rules.

The step functions are pure: they take the current state and one message and
return new arrays. `ServerRule` strategies wrap them with the per-run state
(momentum, head bucket, local momenta) and are what the engine drives.
"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import ClassVar, override

import numpy as np

from .exceptions import SimConfigError, SimNumericError, SimOrderingError
from .registry import Registry
from .types import OptimizerName, Scheduler, Vector

logger: logging.Logger = logging.getLogger(__name__)

# ======================================================================================
#   Models
# ======================================================================================


@dataclass(frozen=True)
class HyperParams:
    """Learning rate, momentum coefficient, worker count and step decay."""

    eta: float
    beta: float
    K: int
    lr_schedule: tuple[tuple[int, float], ...] = ()

    def __post_init__(self) -> None:
        if not (math.isfinite(self.eta) and self.eta > 0):
            raise SimConfigError(
                f"Learning rate `eta` must be positive, got {self.eta!r}",
                service=self.__class__.__name__,
                context={"key": "eta"},
            )
        if not 0.0 <= self.beta < 1.0:
            raise SimConfigError(
                f"Momentum coefficient `beta` must lie in [0, 1), got {self.beta!r}",
                service=self.__class__.__name__,
                context={"key": "beta"},
            )
        if self.K < 1:
            raise SimConfigError(
                f"Worker count must be at least 1, got {self.K!r}",
                service=self.__class__.__name__,
                context={"key": "workers"},
            )
        iterations: list[int] = [it for it, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(iterations, iterations[1:])):
            raise SimConfigError(
                "Learning-rate schedule iterations must be strictly increasing,"
                + f" got {iterations}",
                service=self.__class__.__name__,
                context={"key": "lr_schedule"},
            )
        if any(it < 0 or mult <= 0 for it, mult in self.lr_schedule):
            raise SimConfigError(
                "Learning-rate schedule needs non-negative iterations and positive"
                + f" multipliers, got {list(self.lr_schedule)}",
                service=self.__class__.__name__,
                context={"key": "lr_schedule"},
            )


@dataclass
class MomentumState:
    """Momentum accumulator `u` and head-bucket index `b`."""

    u: Vector
    b: int = 0

    @classmethod
    def zeros(cls, dim: int, /) -> MomentumState:
        return cls(u=np.zeros(dim, dtype=np.float64), b=0)


@dataclass(frozen=True, eq=False)
class GradientMsg:
    """A worker's payload tagged with the iteration index of its base parameter."""

    grad: Vector
    ite: int
    worker_id: int

    def __post_init__(self) -> None:
        if self.ite < 0:
            raise SimOrderingError(
                f"Gradient iteration index must be non-negative, got {self.ite}",
                service=self.__class__.__name__,
                context={"worker": self.worker_id},
            )
        if not np.all(np.isfinite(self.grad)):
            raise SimNumericError(
                f"Worker {self.worker_id} sent a non-finite payload for"
                + f" iteration {self.ite}",
                service=self.__class__.__name__,
                context={"worker": self.worker_id, "ite": self.ite},
            )


@dataclass
class LocalMomentum:
    """Per-worker momenta kept by the shifted-momentum baseline."""

    u_local: dict[int, Vector] = field(default_factory=dict)

    @classmethod
    def zeros(cls, workers: int, dim: int, /) -> LocalMomentum:
        return cls(
            u_local={k: np.zeros(dim, dtype=np.float64) for k in range(workers)}
        )


# ======================================================================================
#   Coefficients
# ======================================================================================


def bucket_index(j: int, K: int, /) -> int:
    """Bucket of a gradient computed at iteration `j`: 0 for `j == 0`, else ceil(j/K)."""

    if j == 0:
        return 0
    return -(-j // K)


def momentum_weight(beta: float, delta: int, /) -> float:
    """`beta ** delta` with `0 ** 0 == 1`."""

    if delta == 0:
        return 1.0
    return beta**delta


def geometric_coefficient(beta: float, delta: int, /) -> float:
    """Closed form of `sum(beta ** j for j in range(delta + 1))`."""

    if delta == 0 or beta == 0.0:
        return 1.0
    return (1.0 - beta ** (delta + 1)) / (1.0 - beta)


def apply_lr_schedule(h: HyperParams, t: int, /) -> float:
    """Effective learning rate at iteration `t`."""

    eta: float = h.eta
    for iteration, multiplier in h.lr_schedule:
        if iteration > t:
            break
        eta *= multiplier
    return eta


# ======================================================================================
#   Step functions
# ======================================================================================


def asgd_step(w: Vector, msg: GradientMsg, h: HyperParams, /, t: int = 0) -> Vector:
    """Plain asynchronous SGD: `w <- w - eta_t * grad`."""

    step: float = apply_lr_schedule(h, t)
    return w - step * msg.grad


def naive_asgdm_step(
    w: Vector, u: Vector, msg: GradientMsg, h: HyperParams, /, t: int = 0
) -> tuple[Vector, Vector]:
    """One global momentum buffer fed in arrival order."""

    eta: float = apply_lr_schedule(h, t)
    u_next: Vector = h.beta * u + eta * msg.grad
    return w - u_next, u_next


def shifted_worker_update(
    u_local: Vector, grad: Vector, h: HyperParams, /, t: int = 0
) -> Vector:
    """Worker side of shifted momentum: `u_local <- beta * u_local + eta * grad`."""

    eta: float = apply_lr_schedule(h, t)
    return h.beta * u_local + eta * grad


def shifted_server_apply(w: Vector, u_local: Vector, /) -> Vector:
    """Server side of shifted momentum: `w <- w - u_local`."""

    return w - u_local


def ssgdm_global_step(
    w: Vector,
    m: MomentumState,
    msg: GradientMsg,
    h: HyperParams,
    /,
    barrier_reset: bool,
    t: int = 0,
) -> tuple[Vector, MomentumState]:
    """Split-step SSGDm with server-side momentum."""

    eta: float = apply_lr_schedule(h, t)
    w_half: Vector = w
    u_half: Vector = m.u
    if barrier_reset:
        w_half = w - h.beta * m.u
        u_half = h.beta * m.u

    return w_half - eta * msg.grad, MomentumState(u=u_half + eta * msg.grad, b=m.b)


def minibatch_sgdm_reference(
    w: Vector,
    u: Vector,
    batch_grads: Sequence[Vector],
    eta_tilde: float,
    beta: float,
    /,
) -> tuple[Vector, Vector]:
    """One step of mini-batch SGD with Polyak momentum over `K` worker gradients."""

    K: int = len(batch_grads)
    mean_step: Vector = (eta_tilde / K) * np.sum(np.stack(batch_grads), axis=0)
    return w - beta * u - mean_step, beta * u + mean_step


def ormo_step(
    w: Vector,
    m: MomentumState,
    msg: GradientMsg,
    h: HyperParams,
    /,
    t: int,
    head_advance: bool,
) -> tuple[Vector, MomentumState]:
    """
    Ordered-momentum update for the gradient delivered at iteration `t`.

    Raises:
        * `SimOrderingError`: If the gradient's bucket is ahead of the head bucket
    """

    w_half: Vector = w
    u_half: Vector = m.u
    b_next: int = m.b
    if head_advance:
        w_half = w - h.beta * m.u
        u_half = h.beta * m.u
        b_next = m.b + 1

    delta: int = b_next - bucket_index(msg.ite, h.K)
    if delta < 0:
        raise SimOrderingError(
            f"Gradient from bucket {bucket_index(msg.ite, h.K)} arrived while the"
            + f" head bucket is {b_next}",
            service="ormo_step",
            context={"t": t, "ite": msg.ite, "worker": msg.worker_id, "b": b_next},
        )

    eta: float = apply_lr_schedule(h, t)
    weight: float = eta * momentum_weight(h.beta, delta)
    step: float = eta * geometric_coefficient(h.beta, delta)
    return w_half - step * msg.grad, MomentumState(u=u_half + weight * msg.grad, b=b_next)


# ======================================================================================
#   Strategies
# ======================================================================================


class ServerRule(ABC):
    """Base strategy for a server update rule driven by the engine."""

    name: ClassVar[str] = ""
    required_scheduler: ClassVar[Scheduler | None] = None

    def __init__(self, hyper: HyperParams) -> None:
        self.hyper: HyperParams = hyper
        self.dim: int = 0

    def reset(self, dim: int, /) -> None:
        """Prepare per-run state for parameters of length `dim`."""

        self.dim = dim

    @abstractmethod
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        """Apply the message delivered at iteration `t` and return the new parameter."""

    def worker_payload(self, worker_id: int, grad: Vector, /, t: int) -> Vector:
        """Payload a worker ships for `grad`, computed at dispatch iteration `t`."""

        return grad

    @property
    def head_bucket(self) -> int | None:
        return None

    @property
    def momentum(self) -> Vector | None:
        return None


class AsgdRule(ServerRule):
    """Plain delayed SGD; SSGD when run under the synchronous scheduler."""

    name: ClassVar[str] = "asgd"

    @override
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        return asgd_step(w, msg, self.hyper, t=t)


class NaiveAsgdmRule(ServerRule):
    """Server momentum applied in arrival order, ignoring gradient age."""

    name: ClassVar[str] = "naive_asgdm"

    def __init__(self, hyper: HyperParams) -> None:
        super().__init__(hyper)
        self._u: Vector = np.zeros(0, dtype=np.float64)

    @override
    def reset(self, dim: int, /) -> None:
        super().reset(dim)
        self._u = np.zeros(dim, dtype=np.float64)

    @override
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        w_next, self._u = naive_asgdm_step(w, self._u, msg, self.hyper, t=t)
        return w_next

    @property
    @override
    def momentum(self) -> Vector | None:
        return self._u


class ShiftedMomentumRule(ServerRule):
    """Local momentum on each worker; the server subtracts what it receives."""

    name: ClassVar[str] = "shifted"

    def __init__(self, hyper: HyperParams) -> None:
        super().__init__(hyper)
        self.local: LocalMomentum = LocalMomentum()

    @override
    def reset(self, dim: int, /) -> None:
        super().reset(dim)
        self.local = LocalMomentum.zeros(self.hyper.K, dim)

    @override
    def worker_payload(self, worker_id: int, grad: Vector, /, t: int) -> Vector:
        u_local: Vector = shifted_worker_update(
            self.local.u_local[worker_id], grad, self.hyper, t=t
        )
        self.local.u_local[worker_id] = u_local
        return u_local

    @override
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        return shifted_server_apply(w, msg.grad)


class SsgdmGlobalRule(ServerRule):
    """Split-step SSGDm with the momentum kept on the server."""

    name: ClassVar[str] = "ssgdm_global"
    required_scheduler: ClassVar[Scheduler | None] = "synchronous"

    def __init__(self, hyper: HyperParams) -> None:
        super().__init__(hyper)
        self.state: MomentumState = MomentumState.zeros(0)

    @override
    def reset(self, dim: int, /) -> None:
        super().reset(dim)
        self.state = MomentumState.zeros(dim)

    @override
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        w_next, self.state = ssgdm_global_step(
            w, self.state, msg, self.hyper, barrier_reset=waiting_empty, t=t
        )
        return w_next

    @property
    @override
    def momentum(self) -> Vector | None:
        return self.state.u


class OrMoRule(ServerRule):
    """
    Ordered momentum.
    Gradients are placed into the momentum bucket of their iteration index and
    the parameter receives the compensation for the bucket steps they missed.
    """

    name: ClassVar[str] = "ormo"

    def __init__(self, hyper: HyperParams) -> None:
        super().__init__(hyper)
        self.state: MomentumState = MomentumState.zeros(0)

    @override
    def reset(self, dim: int, /) -> None:
        super().reset(dim)
        self.state = MomentumState.zeros(dim)

    @override
    def step(self, w: Vector, msg: GradientMsg, /, t: int, waiting_empty: bool) -> Vector:
        head_advance: bool = waiting_empty and bucket_index(t, self.hyper.K) > self.state.b
        if head_advance:
            logger.debug("Head bucket advances to %d at iteration %d", self.state.b + 1, t)
        w_next, self.state = ormo_step(
            w, self.state, msg, self.hyper, t=t, head_advance=head_advance
        )
        return w_next

    @property
    @override
    def head_bucket(self) -> int | None:
        return self.state.b

    @property
    @override
    def momentum(self) -> Vector | None:
        return self.state.u


# ======================================================================================
#   Registry
# ======================================================================================

RULES: Registry[ServerRule] = Registry[ServerRule]("optimizer")
RULES.register("asgd", factory=AsgdRule, description="ASGD", scheduler=None)
RULES.register(
    "naive_asgdm", factory=NaiveAsgdmRule, description="naive ASGDm", scheduler=None
)
RULES.register(
    "shifted", factory=ShiftedMomentumRule, description="shifted momentum", scheduler=None
)
RULES.register("ssgd", factory=AsgdRule, description="SSGD", scheduler="synchronous")
RULES.register(
    "ssgdm_global",
    factory=SsgdmGlobalRule,
    description="SSGDm (global momentum)",
    scheduler="synchronous",
)
RULES.register(
    "ssgdm_local",
    factory=ShiftedMomentumRule,
    description="SSGDm (local momentum)",
    scheduler="synchronous",
)
RULES.register("ormo", factory=OrMoRule, description="OrMo", scheduler=None)


def make_rule(name: OptimizerName | str, hyper: HyperParams, /) -> ServerRule:
    """
    Build the server rule registered as `name`.

    Raises:
        * `SimRegistryError`: If `name` is not a known optimizer
    """

    return RULES.resolve(name, hyper)


def required_scheduler(name: OptimizerName | str, /) -> Scheduler | None:
    """Scheduler an optimizer is bound to, or `None` when it runs under either."""

    scheduler: object = RULES.tag(name, "scheduler")
    if scheduler is None:
        return None
    return "synchronous" if scheduler == "synchronous" else "asynchronous"
